//! Drift detection over the adapter's trainable vector and partial restoration
//! of source parameters.
//!
//! Every step compares the latest displacement `Θ_t − Θ_prev` with the
//! displacement accumulated since the last anchor, `Θ_prev − Θ_anchor`. When
//! their cosine (the GDI) drops below the threshold, a slice of the
//! parameters is restored to the source snapshot.

use std::fmt;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SailError};
use crate::linalg;

/// Norms below this are treated as "no movement".
pub const ZERO_DISPLACEMENT: f64 = 1e-12;

/// Which parameters a reset restores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResetStrategy {
    /// Deepest entries of the depth-ordered vector.
    #[default]
    Deep,
    Shallow,
    /// Uniform sample without replacement.
    Random,
    /// Entries furthest from their source value.
    MaxDrift,
    /// Everything, regardless of α.
    Full,
    None,
}

impl ResetStrategy {
    pub const ALL: [ResetStrategy; 6] = [
        ResetStrategy::Deep,
        ResetStrategy::Shallow,
        ResetStrategy::Random,
        ResetStrategy::MaxDrift,
        ResetStrategy::Full,
        ResetStrategy::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ResetStrategy::Deep => "deep",
            ResetStrategy::Shallow => "shallow",
            ResetStrategy::Random => "random",
            ResetStrategy::MaxDrift => "max-drift",
            ResetStrategy::Full => "full",
            ResetStrategy::None => "none",
        }
    }
}

impl fmt::Display for ResetStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResetStrategy {
    type Err = SailError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| SailError::Config(format!("unknown reset strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResetEvent {
    /// 1-based index of the batch whose update triggered the reset.
    pub step: usize,
    pub gdi: f64,
    pub num_params_reset: usize,
    pub strategy: ResetStrategy,
}

/// Returns `(Θ_t − Θ_prev, Θ_prev − Θ_anchor)`.
pub fn displacements(theta: &[f64], prev: &[f64], anchor: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if theta.len() != prev.len() || prev.len() != anchor.len() {
        return Err(SailError::invalid(format!(
            "displacement length mismatch: {} / {} / {}",
            theta.len(),
            prev.len(),
            anchor.len()
        )));
    }
    let d_t = theta.iter().zip(prev).map(|(a, b)| a - b).collect();
    let d_anchor = prev.iter().zip(anchor).map(|(a, b)| a - b).collect();
    Ok((d_t, d_anchor))
}

/// Cosine between the two displacements, or +1 when either is (near) zero.
pub fn gdi(d_t: &[f64], d_anchor: &[f64]) -> f64 {
    let (na, nb) = (linalg::norm(d_t), linalg::norm(d_anchor));
    if na < ZERO_DISPLACEMENT || nb < ZERO_DISPLACEMENT {
        return 1.0;
    }
    (linalg::dot(d_t, d_anchor) / (na * nb)).clamp(-1.0, 1.0)
}

/// `⌈α/100 · P⌉`, with α clamped to `[0, 100]`.
pub fn reset_count(alpha: f64, total: usize) -> usize {
    let n = (alpha.clamp(0.0, 100.0) / 100.0 * total as f64).ceil() as usize;
    n.min(total)
}

/// Indices that a reset restores, sorted ascending.
///
/// `depth` gives each entry's depth rank; ties are broken by position, so
/// the deepest-first order is "largest rank, then largest position".
pub fn reset_selection(
    theta: &[f64],
    source: &[f64],
    alpha: f64,
    strategy: ResetStrategy,
    depth: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let p = theta.len();
    if source.len() != p || depth.len() != p {
        return Err(SailError::invalid("reset vectors differ in length"));
    }
    if !(0.0..=100.0).contains(&alpha) {
        return Err(SailError::invalid(format!("alpha {alpha} outside [0, 100]")));
    }
    let n = reset_count(alpha, p);
    let mut order: Vec<usize> = (0..p).collect();
    let mut picked = match strategy {
        ResetStrategy::None => Vec::new(),
        ResetStrategy::Full => order,
        ResetStrategy::Deep => {
            order.sort_by(|&a, &b| (depth[b], b).cmp(&(depth[a], a)));
            order.truncate(n);
            order
        }
        ResetStrategy::Shallow => {
            order.sort_by_key(|&i| (depth[i], i));
            order.truncate(n);
            order
        }
        ResetStrategy::Random => index::sample(rng, p, n).into_vec(),
        ResetStrategy::MaxDrift => {
            let mag: Vec<f64> = theta.iter().zip(source).map(|(a, b)| (a - b).abs()).collect();
            order.sort_by(|&a, &b| mag[b].total_cmp(&mag[a]).then(a.cmp(&b)));
            order.truncate(n);
            order
        }
    };
    picked.sort_unstable();
    Ok(picked)
}

/// Restores the selected entries of `theta` from `source`; everything else
/// is left bitwise untouched. Returns the number of entries restored.
pub fn strategic_reset(
    theta: &mut [f64],
    source: &[f64],
    alpha: f64,
    strategy: ResetStrategy,
    depth: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let picked = reset_selection(theta, source, alpha, strategy, depth, rng)?;
    for &i in &picked {
        theta[i] = source[i];
    }
    Ok(picked.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResetConfig {
    /// Steps between anchor refreshes.
    pub interval: usize,
    /// Reset when the GDI falls strictly below this.
    pub threshold: f64,
    /// Percentage of trainable parameters restored.
    pub alpha: f64,
    pub strategy: ResetStrategy,
    /// Seed for the random strategy.
    pub seed: u64,
}

impl Default for ResetConfig {
    fn default() -> Self {
        Self {
            interval: 10,
            threshold: 0.0,
            alpha: DEFAULT_ALPHA,
            strategy: ResetStrategy::Deep,
            seed: 0,
        }
    }
}

/// Default reset percentage, fixed by the development sweep.
pub const DEFAULT_ALPHA: f64 = 50.0;

impl ResetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(SailError::Config("reset interval must be at least 1".into()));
        }
        if !(-1.0..=1.0).contains(&self.threshold) {
            return Err(SailError::Config(format!("reset threshold {} outside [-1, 1]", self.threshold)));
        }
        if !(0.0..=100.0).contains(&self.alpha) {
            return Err(SailError::Config(format!("reset alpha {} outside [0, 100]", self.alpha)));
        }
        Ok(())
    }
}

/// Anchor lifecycle and reset trigger for one run.
#[derive(Debug, Clone)]
pub struct AnchorState {
    source: Vec<f64>,
    depth: Vec<usize>,
    anchor: Vec<f64>,
    prev: Vec<f64>,
    step: usize,
    config: ResetConfig,
    rng: ChaCha8Rng,
    last_gdi: f64,
}

impl AnchorState {
    /// Starts at `t = 0` with anchor and previous parameters equal to the
    /// source snapshot.
    pub fn new(source: Vec<f64>, depth: Vec<usize>, config: ResetConfig) -> Result<Self> {
        config.validate()?;
        if depth.len() != source.len() {
            return Err(SailError::invalid("depth index length differs from parameter count"));
        }
        Ok(Self {
            anchor: source.clone(),
            prev: source.clone(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            source,
            depth,
            step: 0,
            config,
            last_gdi: 1.0,
        })
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn prev(&self) -> &[f64] {
        &self.prev
    }

    pub fn source(&self) -> &[f64] {
        &self.source
    }

    /// Completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &ResetConfig {
        &self.config
    }

    /// GDI computed on the most recent step.
    pub fn last_gdi(&self) -> f64 {
        self.last_gdi
    }

    /// Processes the parameters produced by one update. `theta` is reset in
    /// place if the GDI falls below the threshold; the anchor is refreshed
    /// afterwards, so it captures the post-reset vector.
    pub fn observe_step(&mut self, theta: &mut [f64]) -> Result<Option<ResetEvent>> {
        let (d_t, d_anchor) = displacements(theta, &self.prev, &self.anchor)?;
        let g = gdi(&d_t, &d_anchor);
        self.last_gdi = g;
        let mut event = None;
        if g < self.config.threshold && self.config.strategy != ResetStrategy::None {
            let n = strategic_reset(
                theta,
                &self.source,
                self.config.alpha,
                self.config.strategy,
                &self.depth,
                &mut self.rng,
            )?;
            event = Some(ResetEvent {
                step: self.step + 1,
                gdi: g,
                num_params_reset: n,
                strategy: self.config.strategy,
            });
        }
        if self.step % self.config.interval == 0 {
            self.anchor.copy_from_slice(theta);
        }
        self.prev.copy_from_slice(theta);
        self.step += 1;
        Ok(event)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn displacement_arithmetic() {
        let (a, b) = displacements(&[3.0, 1.0], &[1.0, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(a, vec![2.0, 0.0]);
        assert_eq!(b, vec![1.0, 0.0]);
        assert!(displacements(&[1.0], &[1.0, 2.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn gdi_reference_values() {
        let v = [0.3, -1.2, 2.0];
        let w: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((gdi(&v, &v) - 1.0).abs() < 1e-12);
        assert!((gdi(&v, &w) + 1.0).abs() < 1e-12);
        assert!(gdi(&[1.0, 0.0], &[0.0, 3.0]).abs() < 1e-12);
        assert_eq!(gdi(&[0.0, 0.0], &v[..2]), 1.0);
        assert_eq!(gdi(&v[..2], &[1e-13, 0.0]), 1.0);
    }

    #[test]
    fn reset_count_rounds_up() {
        assert_eq!(reset_count(0.0, 10), 0);
        assert_eq!(reset_count(1.0, 10), 1);
        assert_eq!(reset_count(40.0, 10), 4);
        assert_eq!(reset_count(100.0, 7), 7);
    }

    #[test]
    fn deep_reset_of_ten_params() {
        let mut theta: Vec<f64> = (1..=10).map(f64::from).collect();
        let source = vec![0.0; 10];
        let depth: Vec<usize> = (0..10).map(|i| i / 2).collect();
        let n = strategic_reset(&mut theta, &source, 40.0, ResetStrategy::Deep, &depth, &mut rng()).unwrap();
        assert_eq!(n, 4);
        assert_eq!(theta, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn endpoints() {
        let theta = vec![0.1, 0.2, 0.3];
        let source = vec![1.0, 2.0, 3.0];
        let depth = vec![0, 1, 2];
        for s in ResetStrategy::ALL {
            let mut t = theta.clone();
            strategic_reset(&mut t, &source, 0.0, s, &depth, &mut rng()).unwrap();
            if s == ResetStrategy::Full {
                assert_eq!(t, source);
            } else {
                assert_eq!(t, theta);
            }
            let mut t = theta.clone();
            strategic_reset(&mut t, &source, 100.0, s, &depth, &mut rng()).unwrap();
            if s == ResetStrategy::None {
                assert_eq!(t, theta);
            } else {
                assert_eq!(t, source);
            }
        }
        assert!(strategic_reset(&mut theta.clone(), &source, 101.0, ResetStrategy::Deep, &depth, &mut rng()).is_err());
    }

    #[test]
    fn random_reset_is_seeded() {
        let theta = vec![1.0; 50];
        let source = vec![0.0; 50];
        let depth: Vec<usize> = (0..50).collect();
        let a = reset_selection(&theta, &source, 30.0, ResetStrategy::Random, &depth, &mut rng()).unwrap();
        let b = reset_selection(&theta, &source, 30.0, ResetStrategy::Random, &depth, &mut rng()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 15);
    }

    fn linear(t: usize, v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| x * t as f64).collect()
    }

    #[test]
    fn constant_direction_never_resets() {
        let v = vec![0.5, -0.25, 1.0, 2.0];
        let mut st = AnchorState::new(vec![0.0; 4], (0..4).collect(), ResetConfig::default()).unwrap();
        for t in 1..200 {
            let mut theta = linear(t, &v);
            assert!(st.observe_step(&mut theta).unwrap().is_none());
            assert!(st.last_gdi() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn interval_one_anchor_tracks_prev() {
        let cfg = ResetConfig {
            interval: 1,
            ..ResetConfig::default()
        };
        let mut st = AnchorState::new(vec![0.0; 3], vec![0, 1, 2], cfg).unwrap();
        for t in 1..20 {
            let mut theta = vec![(t as f64).sin(), (t as f64).cos(), t as f64];
            st.observe_step(&mut theta).unwrap();
            assert_eq!(st.anchor(), st.prev());
        }
    }

    #[test]
    fn anchor_refreshes_on_multiples_only() {
        let cfg = ResetConfig {
            interval: 4,
            ..ResetConfig::default()
        };
        let v = [1.0, 1.0];
        let mut st = AnchorState::new(vec![0.0; 2], vec![0, 1], cfg).unwrap();
        for t in 1..=9 {
            st.observe_step(&mut linear(t, &v)).unwrap();
            // anchor captured after completed-step counts 0, 4, 8
            let expect = ((t - 1) / 4) * 4 + 1;
            assert_eq!(st.anchor(), &linear(expect, &v)[..]);
        }
    }

    #[test]
    fn disabled_thresholds_never_reset() {
        for (strategy, threshold) in [(ResetStrategy::None, 0.0), (ResetStrategy::Deep, -1.0)] {
            let cfg = ResetConfig {
                strategy,
                threshold,
                ..ResetConfig::default()
            };
            let mut st = AnchorState::new(vec![0.0; 2], vec![0, 1], cfg).unwrap();
            for t in 1..50 {
                let sign = if (t / 3) % 2 == 0 { 1.0 } else { -1.0 };
                let mut theta = vec![sign * t as f64, 0.5];
                let before = theta.clone();
                assert!(st.observe_step(&mut theta).unwrap().is_none());
                assert_eq!(theta, before);
            }
        }
    }

    proptest! {
        #[test]
        fn gdi_in_range(a in prop::collection::vec(-10.0..10.0f64, 1..8), b in prop::collection::vec(-10.0..10.0f64, 1..8)) {
            let n = a.len().min(b.len());
            let g = gdi(&a[..n], &b[..n]);
            prop_assert!((-1.0..=1.0).contains(&g));
        }

        #[test]
        fn gdi_self_and_negation(v in prop::collection::vec(-10.0..10.0f64, 1..8)) {
            prop_assume!(linalg::norm(&v) > 1e-6);
            let w: Vec<f64> = v.iter().map(|x| -x).collect();
            prop_assert!((gdi(&v, &v) - 1.0).abs() < 1e-12);
            prop_assert!((gdi(&v, &w) + 1.0).abs() < 1e-12);
        }
    }
}
