//! Flat views of the trainable state, split into named parameter groups.

use std::ops::Range;

use crate::elbo::InitPosterior;
use crate::rff::ModelParams;

/// Named groups of trainable scalars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    /// `ln a`
    A,
    /// `b`, `√C`, `ln σ₀`
    Weights,
    /// `ln Λ`
    Lambda,
    Eta,
    /// Forcing-net weights `ϑ`
    Forcing,
    /// `μ_i`, `ln σ_i`
    InitPosterior,
    /// `ln σ`
    Sigma,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::A,
        ParamGroup::Weights,
        ParamGroup::Lambda,
        ParamGroup::Eta,
        ParamGroup::Forcing,
        ParamGroup::InitPosterior,
        ParamGroup::Sigma,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::A => "a",
            ParamGroup::Weights => "weights",
            ParamGroup::Lambda => "Lambda",
            ParamGroup::Eta => "eta",
            ParamGroup::Forcing => "vartheta",
            ParamGroup::InitPosterior => "init_posterior",
            ParamGroup::Sigma => "sigma",
        }
    }
}

/// Model parameters plus the per-trajectory initial-state posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: ModelParams,
    pub posts: Vec<InitPosterior>,
}

/// Contiguous slice of the flat vector owned by each active group.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub groups: Vec<(ParamGroup, Range<usize>)>,
    pub len: usize,
}

impl Layout {
    pub fn range(&self, group: ParamGroup) -> Option<Range<usize>> {
        self.groups.iter().find(|(g, _)| *g == group).map(|(_, r)| r.clone())
    }
}

impl TrainState {
    pub fn zeros_like(&self) -> TrainState {
        TrainState {
            model: self.model.zeros_like(),
            posts: self.posts.iter().map(|p| InitPosterior::zeros(p.mu.len())).collect(),
        }
    }

    /// Multiplies every scalar, including the noise-model groups, by `s`.
    pub fn scale(&mut self, s: f64) {
        for (_, v) in self.scalars_mut(false) {
            *v *= s;
        }
    }

    /// Every trainable scalar, grouped and in a fixed order. With
    /// `noise_prior` the noise-model groups (`a`, `σ`) are left out.
    pub fn scalars_mut(&mut self, noise_prior: bool) -> Vec<(ParamGroup, &mut f64)> {
        let m = &mut self.model;
        let mut out: Vec<(ParamGroup, &mut f64)> = Vec::new();
        if !noise_prior {
            out.push((ParamGroup::A, &mut m.log_a));
        }
        out.extend(m.rff.b.iter_mut().flatten().map(|v| (ParamGroup::Weights, v)));
        out.extend(m.rff.sqrt_c.iter_mut().flatten().map(|v| (ParamGroup::Weights, v)));
        out.push((ParamGroup::Weights, &mut m.rff.log_sigma0));
        out.extend(m.rff.log_lambda.iter_mut().map(|v| (ParamGroup::Lambda, v)));
        if let Some(eta) = m.eta.as_mut() {
            out.extend(eta.iter_mut().map(|v| (ParamGroup::Eta, v)));
        }
        if let Some(f) = m.forcing.as_mut() {
            out.extend(
                f.w1.iter_mut()
                    .chain(f.b1.iter_mut())
                    .chain(f.w2.iter_mut())
                    .chain(f.b2.iter_mut())
                    .map(|v| (ParamGroup::Forcing, v)),
            );
        }
        for p in self.posts.iter_mut() {
            out.extend(
                p.mu.iter_mut()
                    .chain(p.log_sigma.iter_mut())
                    .map(|v| (ParamGroup::InitPosterior, v)),
            );
        }
        if !noise_prior {
            out.push((ParamGroup::Sigma, &mut m.log_sigma));
        }
        out
    }

    pub fn layout(&self, noise_prior: bool) -> Layout {
        let mut copy = self.clone();
        let scalars = copy.scalars_mut(noise_prior);
        let mut groups: Vec<(ParamGroup, Range<usize>)> = Vec::new();
        for (i, (g, _)) in scalars.iter().enumerate() {
            match groups.last_mut() {
                Some((last, r)) if last == g => r.end = i + 1,
                _ => groups.push((*g, i..i + 1)),
            }
        }
        Layout {
            groups,
            len: scalars.len(),
        }
    }

    pub fn flatten(&self, noise_prior: bool) -> Vec<f64> {
        let mut copy = self.clone();
        copy.scalars_mut(noise_prior).into_iter().map(|(_, v)| *v).collect()
    }

    /// Overwrites the active scalars from `flat`.
    pub fn assign(&mut self, noise_prior: bool, flat: &[f64]) {
        let scalars = self.scalars_mut(noise_prior);
        assert_eq!(scalars.len(), flat.len(), "flat vector does not match the layout");
        for ((_, v), x) in scalars.into_iter().zip(flat) {
            *v = *x;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rff::InitConfig;
    use crate::types::DynamicsClass;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(class: DynamicsClass) -> TrainState {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = InitConfig {
            num_bases: 4,
            forcing_hidden: 3,
            ..InitConfig::default()
        };
        let model = ModelParams::init(class, 1, &cfg, &mut rng);
        TrainState {
            model,
            posts: vec![InitPosterior::at(&[0.1, 0.2], 0.1); 2],
        }
    }

    #[test]
    fn groups_are_contiguous_and_partition_the_vector() {
        for class in [DynamicsClass::Conservative, DynamicsClass::Dissipative, DynamicsClass::PortHamiltonian] {
            let s = state(class);
            for noise_prior in [false, true] {
                let layout = s.layout(noise_prior);
                let mut covered = 0;
                for (_, r) in &layout.groups {
                    assert_eq!(r.start, covered);
                    covered = r.end;
                }
                assert_eq!(covered, layout.len);
                let names: Vec<_> = layout.groups.iter().map(|(g, _)| *g).collect();
                let mut dedup = names.clone();
                dedup.dedup();
                assert_eq!(names, dedup);
                assert_eq!(names.contains(&ParamGroup::Eta), class.has_dissipation());
                assert_eq!(names.contains(&ParamGroup::Forcing), class.has_forcing());
                assert_eq!(names.contains(&ParamGroup::Sigma), !noise_prior);
                assert_eq!(names.contains(&ParamGroup::A), !noise_prior);
            }
        }
    }

    #[test]
    fn flatten_assign_roundtrip() {
        let s = state(DynamicsClass::PortHamiltonian);
        let flat = s.flatten(false);
        let layout = s.layout(false);
        assert_eq!(flat.len(), layout.len);
        // 4 bases × (2 + 3) + σ₀ = 21 weight scalars
        assert_eq!(layout.range(ParamGroup::Weights).unwrap().len(), 21);
        assert_eq!(layout.range(ParamGroup::InitPosterior).unwrap().len(), 8);
        let mut t = s.zeros_like();
        t.assign(false, &flat);
        assert_eq!(t.flatten(false), flat);
        assert_eq!(t.model.rff.omega_eps, vec![0.0; 8]);
    }
}
