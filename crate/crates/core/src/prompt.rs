//! Learnable per-phase prompts.
//!
//! The prompt for phase `p` is a sequence of `1 + m` token embeddings: a
//! phase-specific first token followed by `m` learnable context tokens. The
//! first tokens are either learned independently for every phase, or learned
//! only at `n` reference phases and linearly interpolated in between so that
//! the phase order is reflected in token space.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, InterpTerm, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Standard deviation of the Gaussian used for token initialisation.
pub const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptVariant {
    /// One free first token per phase.
    Independent,
    /// First tokens interpolated between reference phases.
    Ordinal,
}

impl std::str::FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(PromptVariant::Independent),
            "ordinal" => Ok(PromptVariant::Ordinal),
            other => Err(Error::Config(format!(
                "unknown prompt variant `{other}` (independent or ordinal)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBankConfig {
    pub phases: usize,
    /// Number of context tokens `m` after the first token.
    pub context_tokens: usize,
    pub token_dim: usize,
    pub variant: PromptVariant,
    /// 1-based reference phase ids; empty for the independent variant.
    pub reference_indices: Vec<usize>,
    /// One context shared by every phase, or a separate context per phase.
    pub shared_context: bool,
}

impl PromptBankConfig {
    pub fn independent(phases: usize, context_tokens: usize, token_dim: usize) -> Self {
        Self {
            phases,
            context_tokens,
            token_dim,
            variant: PromptVariant::Independent,
            reference_indices: Vec::new(),
            shared_context: true,
        }
    }

    /// Ordinal variant with references from [`default_reference_indices`].
    pub fn ordinal(phases: usize, context_tokens: usize, token_dim: usize, n: usize) -> Result<Self> {
        let cfg = Self {
            phases,
            context_tokens,
            token_dim,
            variant: PromptVariant::Ordinal,
            reference_indices: default_reference_indices(phases, n)?,
            shared_context: true,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases == 0 {
            return Err(Error::Config("prompt bank needs at least one phase".into()));
        }
        if self.token_dim == 0 {
            return Err(Error::Config("token_dim must be positive".into()));
        }
        if self.variant == PromptVariant::Ordinal {
            let r = &self.reference_indices;
            if r.len() < 2 || r.len() > self.phases {
                return Err(Error::Config(format!(
                    "ordinal prompts need 2 <= n <= P references, got n={} for P={}",
                    r.len(),
                    self.phases
                )));
            }
            if r[0] != 1 || *r.last().unwrap() != self.phases {
                return Err(Error::Config(format!(
                    "reference indices must start at 1 and end at P={}: {r:?}",
                    self.phases
                )));
            }
            if r.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::Config(format!(
                    "reference indices must be strictly increasing: {r:?}"
                )));
            }
        }
        Ok(())
    }

    /// Number of stored first tokens: `P` or `n`.
    pub fn first_token_rows(&self) -> usize {
        match self.variant {
            PromptVariant::Independent => self.phases,
            PromptVariant::Ordinal => self.reference_indices.len(),
        }
    }

    /// Length of every materialised prompt.
    pub fn prompt_len(&self) -> usize {
        1 + self.context_tokens
    }
}

/// `n` evenly spaced phase ids from 1 to `phases`, each rounded half down:
/// `P = 7, n = 3` gives `[1, 4, 7]` and `P = 8, n = 3` gives `[1, 4, 8]`.
pub fn default_reference_indices(phases: usize, n: usize) -> Result<Vec<usize>> {
    if n < 2 {
        return Err(Error::Config(format!("need at least 2 reference phases, got {n}")));
    }
    if n > phases {
        return Err(Error::Config(format!(
            "cannot pick {n} reference phases out of {phases}"
        )));
    }
    let den = n - 1;
    let mut ids: Vec<usize> = (0..n)
        .map(|i| {
            // value = 1 + i (P-1) / (n-1); round half down = ceil(value - 1/2)
            let num = den + i * (phases - 1);
            let twice = 2 * num;
            let shifted = twice.saturating_sub(den);
            shifted.div_ceil(2 * den).max(1)
        })
        .collect();
    ids.dedup();
    // Pad with the nearest unused ids to keep exactly n references.
    while ids.len() < n {
        let mut best: Option<(usize, usize)> = None;
        for cand in 1..=phases {
            if ids.contains(&cand) {
                continue;
            }
            let dist = ids.iter().map(|&r| r.abs_diff(cand)).min().unwrap_or(0);
            if best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, cand));
            }
        }
        ids.push(best.expect("n <= phases leaves a free id").1);
        ids.sort_unstable();
    }
    Ok(ids)
}

/// Interpolation recipe for every phase's first token: the bracketing
/// reference rows and the weight on the upper one.
pub fn interpolation_plan(phases: usize, reference_indices: &[usize]) -> Vec<InterpTerm> {
    (1..=phases)
        .map(|p| {
            let i = reference_indices
                .iter()
                .rposition(|&r| r <= p)
                .expect("reference ids start at 1");
            let r_lo = reference_indices[i];
            if r_lo == p || i + 1 == reference_indices.len() {
                InterpTerm {
                    lo: i,
                    hi: (i + 1).min(reference_indices.len() - 1),
                    lambda: 0.0,
                }
            } else {
                let r_hi = reference_indices[i + 1];
                InterpTerm {
                    lo: i,
                    hi: i + 1,
                    lambda: (p - r_lo) as f64 / (r_hi - r_lo) as f64,
                }
            }
        })
        .collect()
}

/// The first token of phase `p` (1-based) from reference tokens `[n, D]`.
pub fn interpolate_first_token(references: &Tensor, reference_indices: &[usize], p: usize) -> Vec<f64> {
    let phases = *reference_indices.last().expect("non-empty references");
    assert!((1..=phases).contains(&p), "phase {p} outside 1..={phases}");
    let term = interpolation_plan(phases, reference_indices)[p - 1];
    let lo = references.row(term.lo);
    if term.lambda == 0.0 {
        return lo.to_vec();
    }
    let hi = references.row(term.hi);
    lo.iter()
        .zip(hi)
        .map(|(a, b)| (1.0 - term.lambda) * a + term.lambda * b)
        .collect()
}

/// Prompt parameters. Stored under `context` and `first`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBank {
    pub cfg: PromptBankConfig,
    pub params: ParamStore,
}

/// Prefix used when binding bank parameters into a graph.
pub const PARAM_PREFIX: &str = "prompt.";

impl PromptBank {
    /// Gaussian initialisation. `phase_token` may supply a starting embedding
    /// for a 1-based phase id (e.g. the text encoder's embedding of that
    /// digit); phases it returns `None` for fall back to the Gaussian.
    pub fn init<R: Rng + ?Sized>(
        cfg: PromptBankConfig,
        rng: &mut R,
        phase_token: &dyn Fn(usize) -> Option<Vec<f64>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.token_dim;
        let m = cfg.context_tokens;
        let context = if cfg.shared_context {
            Tensor::randn([m, d], TOKEN_INIT_STD, rng)
        } else {
            Tensor::randn([cfg.phases, m, d], TOKEN_INIT_STD, rng)
        };
        let ids: Vec<usize> = match cfg.variant {
            PromptVariant::Independent => (1..=cfg.phases).collect(),
            PromptVariant::Ordinal => cfg.reference_indices.clone(),
        };
        let mut first = Tensor::randn([ids.len(), d], TOKEN_INIT_STD, rng);
        for (row, &id) in ids.iter().enumerate() {
            if let Some(emb) = phase_token(id) {
                if emb.len() != d {
                    return Err(Error::Config(format!(
                        "phase token embedding has width {}, expected {d}",
                        emb.len()
                    )));
                }
                first.data_mut()[row * d..(row + 1) * d].copy_from_slice(&emb);
            }
        }
        let mut params = ParamStore::new();
        params.insert("context", context);
        params.insert("first", first);
        Ok(Self { cfg, params })
    }

    /// Rebuilds a bank from stored tensors, checking their shapes.
    pub fn from_params(cfg: PromptBankConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let ctx_shape: Vec<usize> = if cfg.shared_context {
            vec![cfg.context_tokens, cfg.token_dim]
        } else {
            vec![cfg.phases, cfg.context_tokens, cfg.token_dim]
        };
        let first_shape = vec![cfg.first_token_rows(), cfg.token_dim];
        for (name, shape) in [("context", ctx_shape), ("first", first_shape)] {
            match params.try_get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Config(format!(
                        "prompt tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Config(format!("prompt tensor `{name}` is missing"))),
            }
        }
        Ok(Self { cfg, params })
    }

    pub fn phases(&self) -> usize {
        self.cfg.phases
    }

    /// First tokens of every phase, `[P, D]`.
    pub fn first_tokens(&self, g: &mut Graph, trainable: bool) -> Var {
        let first = g.param("prompt.first", self.params.get("first"), trainable);
        match self.cfg.variant {
            PromptVariant::Independent => first,
            PromptVariant::Ordinal => {
                let plan = interpolation_plan(self.cfg.phases, &self.cfg.reference_indices);
                g.interp_rows(first, &plan)
            }
        }
    }

    fn context_for(&self, g: &mut Graph, phase_index: usize, trainable: bool) -> Option<Var> {
        let m = self.cfg.context_tokens;
        if m == 0 {
            return None;
        }
        let ctx = g.param("prompt.context", self.params.get("context"), trainable);
        if self.cfg.shared_context {
            Some(ctx)
        } else {
            let flat = g.reshape(ctx, [self.cfg.phases, m * self.cfg.token_dim]);
            let row = g.index_rows(flat, &[phase_index]);
            Some(g.reshape(row, [m, self.cfg.token_dim]))
        }
    }

    fn assemble(&self, g: &mut Graph, first_all: Var, p: usize, trainable: bool) -> Var {
        let first = g.index_rows(first_all, &[p - 1]);
        match self.context_for(g, p - 1, trainable) {
            Some(ctx) => g.concat0(&[first, ctx]),
            None => first,
        }
    }

    /// The `[1 + m, D]` token sequence of phase `p` (1-based).
    pub fn materialize(&self, g: &mut Graph, p: usize, trainable: bool) -> Result<Var> {
        if !(1..=self.cfg.phases).contains(&p) {
            return Err(Error::Invalid(format!(
                "phase {p} outside 1..={}",
                self.cfg.phases
            )));
        }
        let first_all = self.first_tokens(g, trainable);
        Ok(self.assemble(g, first_all, p, trainable))
    }

    /// Token sequences of all phases in id order.
    pub fn materialize_all(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        let first_all = self.first_tokens(g, trainable);
        (1..=self.cfg.phases)
            .map(|p| self.assemble(g, first_all, p, trainable))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn none(_: usize) -> Option<Vec<f64>> {
        None
    }

    #[test]
    fn default_references() {
        assert_eq!(default_reference_indices(7, 3).unwrap(), vec![1, 4, 7]);
        assert_eq!(default_reference_indices(8, 3).unwrap(), vec![1, 4, 8]);
        assert_eq!(default_reference_indices(7, 2).unwrap(), vec![1, 7]);
        assert_eq!(default_reference_indices(5, 5).unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(default_reference_indices(6, 3).unwrap(), vec![1, 3, 6]);
        assert!(default_reference_indices(3, 4).is_err());
        assert!(default_reference_indices(3, 1).is_err());
    }

    #[test]
    fn default_references_always_valid() {
        for p in 2..40 {
            for n in 2..=p {
                let r = default_reference_indices(p, n).unwrap();
                assert_eq!(r.len(), n);
                assert_eq!(r[0], 1);
                assert_eq!(*r.last().unwrap(), p);
                assert!(r.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn interpolation_values() {
        let refs = Tensor::from_vec([3, 2], vec![3.0, 0.0, 0.0, 3.0, 6.0, 6.0]);
        let idx = [1, 4, 7];
        assert_eq!(interpolate_first_token(&refs, &idx, 4), vec![0.0, 3.0]);
        // p = 2: 2/3 E1 + 1/3 E4
        let t2 = interpolate_first_token(&refs, &idx, 2);
        assert!((t2[0] - 2.0).abs() < 1e-15 && (t2[1] - 1.0).abs() < 1e-15);
        // p = 6: 1/3 E4 + 2/3 E7
        let t6 = interpolate_first_token(&refs, &idx, 6);
        assert!((t6[0] - 4.0).abs() < 1e-15 && (t6[1] - 5.0).abs() < 1e-15);
    }

    #[test]
    fn materialized_prompt_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = PromptBank::init(PromptBankConfig::independent(7, 4, 5), &mut rng, &none).unwrap();
        let mut g = Graph::new();
        let v = bank.materialize(&mut g, 3, true).unwrap();
        assert_eq!(g.shape(v), &[5, 5]);
        let t = g.value(v);
        assert_eq!(t.row(0), bank.params.get("first").row(2));
        for j in 0..4 {
            assert_eq!(t.row(1 + j), bank.params.get("context").row(j));
        }
        assert!(bank.materialize(&mut g, 0, true).is_err());
        assert!(bank.materialize(&mut g, 8, true).is_err());
    }

    #[test]
    fn per_phase_context_and_zero_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = PromptBankConfig::independent(3, 2, 4);
        cfg.shared_context = false;
        let bank = PromptBank::init(cfg, &mut rng, &none).unwrap();
        let mut g = Graph::new();
        let prompts = bank.materialize_all(&mut g, false);
        let ctx = bank.params.get("context");
        assert_eq!(g.value(prompts[2]).row(1), &ctx.data()[2 * 8..2 * 8 + 4]);

        let bank0 = PromptBank::init(PromptBankConfig::independent(3, 0, 4), &mut rng, &none).unwrap();
        let mut g = Graph::new();
        let v = bank0.materialize(&mut g, 1, true).unwrap();
        assert_eq!(g.shape(v), &[1, 4]);
    }

    #[test]
    fn digit_initialisation_is_used_when_available() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = PromptBankConfig::ordinal(7, 2, 3, 3).unwrap();
        let init = |p: usize| (p <= 4).then(|| vec![p as f64; 3]);
        let bank = PromptBank::init(cfg, &mut rng, &init).unwrap();
        let first = bank.params.get("first");
        assert_eq!(first.row(0), &[1.0; 3]);
        assert_eq!(first.row(1), &[4.0; 3]);
        assert_ne!(first.row(2), &[7.0; 3]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = PromptBankConfig::ordinal(7, 2, 3, 3).unwrap();
        cfg.reference_indices = vec![2, 4, 7];
        assert!(cfg.validate().is_err());
        cfg.reference_indices = vec![1, 4, 4, 7];
        assert!(cfg.validate().is_err());
        cfg.reference_indices = vec![1, 6];
        assert!(cfg.validate().is_err());
    }
}
