//! Adaptive decoupled control: one cross-attention expert per condition
//! modality, combined with non-negative condition weights and blended into
//! the hidden states through a zero-initialised gate.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::encoders::ProjectedFeature;
use crate::error::{invalid, mismatch, Result};
use crate::nn::{attend, to_f64_vec, Init, Linear, Scope};

/// Number of learnable per-instance weight slots; instance `i` uses slot `i`.
pub const INSTANCE_WEIGHT_SLOTS: usize = 16;

/// Parameter names of the condition weights.
pub const W_BG: &str = "control.w_bg";
pub const W_INST: &str = "control.w_inst";
pub const W_TEXT: &str = "control.w_text";

/// Plain values of the condition weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightValues {
    pub w_bg: f64,
    pub w_inst: Vec<f64>,
    pub w_text: f64,
}

/// Partial, inference-time weight overrides. Instance indices are 0-based.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_bg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_text: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub w_inst: BTreeMap<usize, f64>,
}

impl WeightOverrides {
    pub fn is_empty(&self) -> bool {
        self.w_bg.is_none() && self.w_text.is_none() && self.w_inst.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: String, v: f64| -> Result<()> {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("weight {name} must be a finite value ≥ 0, got {v}")));
            }
            Ok(())
        };
        if let Some(v) = self.w_bg {
            check("w_bg".into(), v)?;
        }
        if let Some(v) = self.w_text {
            check("w_text".into(), v)?;
        }
        for (i, v) in &self.w_inst {
            check(format!("w_inst[{i}]"), *v)?;
        }
        Ok(())
    }
}

/// Weights attached to one bundle: scalars for background and text, one
/// entry per instance.
#[derive(Debug, Clone)]
pub struct ConditionWeights {
    pub bg: Tensor,
    pub inst: Vec<Tensor>,
    pub text: Tensor,
}

impl ConditionWeights {
    pub fn constant(values: &WeightValues, dtype: DType, device: &Device) -> Result<Self> {
        let s = |v: f64| -> Result<Tensor> { Ok(Tensor::new(&[v], device)?.to_dtype(dtype)?) };
        Ok(Self {
            bg: s(values.w_bg)?,
            inst: values.w_inst.iter().map(|v| s(*v)).collect::<Result<_>>()?,
            text: s(values.w_text)?,
        })
    }

    pub fn values(&self) -> Result<WeightValues> {
        let one = |t: &Tensor| -> Result<f64> { Ok(to_f64_vec(t)?[0]) };
        Ok(WeightValues {
            w_bg: one(&self.bg)?,
            w_inst: self.inst.iter().map(one).collect::<Result<_>>()?,
            w_text: one(&self.text)?,
        })
    }
}

/// Projected condition features plus their weights.
#[derive(Debug, Clone)]
pub struct ConditionBundle {
    pub bg: Option<ProjectedFeature>,
    pub instances: Vec<ProjectedFeature>,
    pub text: Option<ProjectedFeature>,
    pub weights: ConditionWeights,
}

impl ConditionBundle {
    pub fn check(&self, width: usize) -> Result<()> {
        if self.weights.inst.len() != self.instances.len() {
            return Err(mismatch("instance weights", self.instances.len(), self.weights.inst.len()));
        }
        let feats = self.bg.iter().chain(self.instances.iter()).chain(self.text.iter());
        for f in feats {
            let w = f.width()?;
            if w != width {
                return Err(mismatch("condition feature width", width, w));
            }
        }
        Ok(())
    }
}

/// Replaces selected weights with constants. Training-time freezing of the
/// background weight does not apply here.
pub fn set_weights(bundle: &ConditionBundle, overrides: &WeightOverrides) -> Result<ConditionBundle> {
    overrides.validate()?;
    let mut out = bundle.clone();
    if overrides.is_empty() {
        return Ok(out);
    }
    let dtype = bundle.weights.bg.dtype();
    let dev = bundle.weights.bg.device().clone();
    let s = |v: f64| -> Result<Tensor> { Ok(Tensor::new(&[v], &dev)?.to_dtype(dtype)?) };
    if let Some(v) = overrides.w_bg {
        out.weights.bg = s(v)?;
    }
    if let Some(v) = overrides.w_text {
        out.weights.text = s(v)?;
    }
    for (i, v) in &overrides.w_inst {
        let slot = out
            .weights
            .inst
            .get_mut(*i)
            .ok_or_else(|| invalid(format!("w_inst[{i}] overrides a missing instance (N = {})", bundle.instances.len())))?;
        *slot = s(*v)?;
    }
    Ok(out)
}

/// Cross-attention from hidden states onto condition tokens.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(scope: &Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            q: Linear::new(&scope.pp("q"), dim, dim)?,
            k: Linear::new(&scope.pp("k"), dim, dim)?,
            v: Linear::new(&scope.pp("v"), dim, dim)?,
            out: Linear::new(&scope.pp("out"), dim, dim)?,
            heads,
        })
    }

    pub fn forward(&self, hidden: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(hidden)?;
        let k = self.k.forward(cond)?;
        let v = self.v.forward(cond)?;
        self.out.forward(&attend(&q, &k, &v, self.heads, None)?)
    }
}

/// The three condition experts of one block.
#[derive(Debug, Clone)]
pub struct ExpertAttention {
    pub bg: CrossAttention,
    pub inst: CrossAttention,
    pub text: CrossAttention,
}

impl ExpertAttention {
    pub fn new(scope: &Scope, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            bg: CrossAttention::new(&scope.pp("bg"), dim, heads)?,
            inst: CrossAttention::new(&scope.pp("inst"), dim, heads)?,
            text: CrossAttention::new(&scope.pp("text"), dim, heads)?,
        })
    }

    /// `W_bg·CA_bg(H, F_bg) + Σ_i W_inst^i·CA_inst(H, F_inst^i) + W_text·CA_text(H, F_text)`.
    pub fn forward(&self, hidden: &Tensor, bundle: &ConditionBundle) -> Result<Tensor> {
        let width = hidden.dim(1)?;
        bundle.check(width)?;
        let mut acc = hidden.zeros_like()?;
        if let Some(bg) = &bundle.bg {
            let a = self.bg.forward(hidden, &bg.tokens)?;
            acc = (acc + a.broadcast_mul(&bundle.weights.bg)?)?;
        }
        for (f, w) in bundle.instances.iter().zip(&bundle.weights.inst) {
            let a = self.inst.forward(hidden, &f.tokens)?;
            acc = (acc + a.broadcast_mul(w)?)?;
        }
        if let Some(text) = &bundle.text {
            let a = self.text.forward(hidden, &text.tokens)?;
            acc = (acc + a.broadcast_mul(&bundle.weights.text)?)?;
        }
        Ok(acc)
    }
}

/// Per-block gate scalar.
#[derive(Debug, Clone)]
pub struct GateState {
    pub g: Tensor,
}

impl GateState {
    pub fn new(scope: &Scope) -> Result<Self> {
        Ok(Self {
            g: scope.get("g", &[1], Init::Zeros)?,
        })
    }
}

/// `H' = H + tanh(g)·H_attn`.
pub fn gate(hidden: &Tensor, attn: &Tensor, state: &GateState) -> Result<Tensor> {
    if hidden.dims() != attn.dims() {
        return Err(invalid(format!(
            "gate inputs differ in shape: {:?} vs {:?}",
            hidden.dims(),
            attn.dims()
        )));
    }
    Ok((hidden + attn.broadcast_mul(&state.g.tanh()?)?)?)
}

/// The learnable weight vector shared by all blocks.
#[derive(Debug, Clone)]
pub struct LearnedWeights {
    pub w_bg: Tensor,
    pub w_inst: Tensor,
    pub w_text: Tensor,
}

impl LearnedWeights {
    pub fn new(scope: &Scope) -> Result<Self> {
        Ok(Self {
            w_bg: scope.get("w_bg", &[1], Init::Const(1.0))?,
            w_inst: scope.get("w_inst", &[INSTANCE_WEIGHT_SLOTS], Init::Const(1.0))?,
            w_text: scope.get("w_text", &[1], Init::Const(1.0))?,
        })
    }

    /// Weights for a bundle with `n` instances.
    pub fn for_instances(&self, n: usize) -> Result<ConditionWeights> {
        if n > INSTANCE_WEIGHT_SLOTS {
            return Err(invalid(format!(
                "{n} instances exceed the {INSTANCE_WEIGHT_SLOTS} weight slots"
            )));
        }
        Ok(ConditionWeights {
            bg: self.w_bg.clone(),
            inst: (0..n).map(|i| self.w_inst.narrow(0, i, 1)).collect::<candle_core::Result<_>>()?,
            text: self.w_text.clone(),
        })
    }

    pub fn values(&self, n: usize) -> Result<WeightValues> {
        self.for_instances(n)?.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn feat(rows: usize, dim: usize, seed: f64) -> ProjectedFeature {
        let vals: Vec<f64> = (0..rows * dim).map(|i| ((i as f64 + 1.0) * seed).sin()).collect();
        ProjectedFeature {
            tokens: Tensor::from_vec(vals, (rows, dim), &Device::Cpu).unwrap(),
        }
    }

    fn bundle(w: &WeightValues, text_seed: f64) -> ConditionBundle {
        ConditionBundle {
            bg: Some(feat(3, 8, 0.3)),
            instances: vec![feat(2, 8, 0.7), feat(4, 8, 1.1)],
            text: Some(feat(5, 8, text_seed)),
            weights: ConditionWeights::constant(w, DType::F64, &Device::Cpu).unwrap(),
        }
    }

    fn hidden() -> Tensor {
        let vals: Vec<f64> = (0..6 * 8).map(|i| (i as f64 * 0.37).cos()).collect();
        Tensor::from_vec(vals, (6, 8), &Device::Cpu).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let store = ParamStore::new(0, DType::F64);
        let ex = ExpertAttention::new(&store.root(), 8, 2).unwrap();
        let w = WeightValues { w_bg: 0.0, w_inst: vec![0.0, 0.0], w_text: 0.0 };
        let out = ex.forward(&hidden(), &bundle(&w, 0.5)).unwrap();
        assert!(to_f64_vec(&out).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn text_only_weight_selects_text_branch() {
        let store = ParamStore::new(0, DType::F64);
        let ex = ExpertAttention::new(&store.root(), 8, 2).unwrap();
        let w = WeightValues { w_bg: 0.0, w_inst: vec![0.0, 0.0], w_text: 1.0 };
        let b = bundle(&w, 0.5);
        let out = to_f64_vec(&ex.forward(&hidden(), &b).unwrap()).unwrap();
        let direct = to_f64_vec(&ex.text.forward(&hidden(), &b.text.unwrap().tokens).unwrap()).unwrap();
        assert_eq!(out, direct);
    }

    #[test]
    fn override_zero_text_ignores_text_content() {
        let store = ParamStore::new(0, DType::F64);
        let ex = ExpertAttention::new(&store.root(), 8, 2).unwrap();
        let w = WeightValues { w_bg: 1.0, w_inst: vec![1.0, 1.0], w_text: 1.0 };
        let ov = WeightOverrides { w_text: Some(0.0), ..Default::default() };
        let a = set_weights(&bundle(&w, 0.5), &ov).unwrap();
        let b = set_weights(&bundle(&w, 2.9), &ov).unwrap();
        let oa = to_f64_vec(&ex.forward(&hidden(), &a).unwrap()).unwrap();
        let ob = to_f64_vec(&ex.forward(&hidden(), &b).unwrap()).unwrap();
        let diff = oa.iter().zip(&ob).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert_eq!(diff, 0.0);
    }

    #[test]
    fn overrides_are_partial_and_validated() {
        let w = WeightValues { w_bg: 1.0, w_inst: vec![1.0, 1.0], w_text: 1.0 };
        let b = bundle(&w, 0.5);
        let same = set_weights(&b, &WeightOverrides::default()).unwrap();
        assert_eq!(same.weights.values().unwrap(), w);
        let mut ov = WeightOverrides::default();
        ov.w_inst.insert(1, 0.5);
        let changed = set_weights(&b, &ov).unwrap().weights.values().unwrap();
        assert_eq!(changed, WeightValues { w_bg: 1.0, w_inst: vec![1.0, 0.5], w_text: 1.0 });
        let neg = WeightOverrides { w_bg: Some(-0.1), ..Default::default() };
        assert!(set_weights(&b, &neg).is_err());
        let mut missing = WeightOverrides::default();
        missing.w_inst.insert(5, 1.0);
        assert!(set_weights(&b, &missing).is_err());
    }

    #[test]
    fn gate_identity_and_saturation() {
        let store = ParamStore::new(0, DType::F64);
        let state = GateState::new(&store.root()).unwrap();
        let h = hidden();
        let a = (hidden() * 3.0).unwrap();
        assert_eq!(to_f64_vec(&gate(&h, &a, &state).unwrap()).unwrap(), to_f64_vec(&h).unwrap());
        store.set_values("g", &[40.0]).unwrap();
        let out = to_f64_vec(&gate(&h, &a, &state).unwrap()).unwrap();
        let expect = to_f64_vec(&(&h + &a).unwrap()).unwrap();
        for (x, y) in out.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
        let wrong = Tensor::zeros((2, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(gate(&h, &wrong, &state).is_err());
    }

    #[test]
    fn gate_derivative_matches_finite_difference() {
        let store = ParamStore::new(0, DType::F64);
        let state = GateState::new(&store.root()).unwrap();
        let h = hidden();
        let a = (hidden() * 0.7).unwrap();
        let g0 = 0.3f64;
        let eps = 1e-6;
        let eval = |g: f64| {
            store.set_values("g", &[g]).unwrap();
            to_f64_vec(&gate(&h, &a, &state).unwrap()).unwrap()
        };
        let (plus, minus) = (eval(g0 + eps), eval(g0 - eps));
        let av = to_f64_vec(&a).unwrap();
        let d = 1.0 - g0.tanh().powi(2);
        for i in 0..av.len() {
            let fd = (plus[i] - minus[i]) / (2.0 * eps);
            let an = d * av[i];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-8), "{fd} vs {an}");
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let store = ParamStore::new(0, DType::F64);
        let ex = ExpertAttention::new(&store.root(), 8, 2).unwrap();
        let w = WeightValues { w_bg: 1.0, w_inst: vec![], w_text: 1.0 };
        let b = ConditionBundle {
            bg: Some(feat(3, 4, 0.3)),
            instances: vec![],
            text: None,
            weights: ConditionWeights::constant(&w, DType::F64, &Device::Cpu).unwrap(),
        };
        assert!(ex.forward(&hidden(), &b).is_err());
    }
}
