//! Scalar reference implementations and the measurements built on them.
//! Each `measure_*` returns the worst observed deviation; callers pick the tolerance.

use animator_core::attention::{AttentionMode, InstanceAttention, SegmentLayout, TokenSequence};
use animator_core::canvas::{CanvasSpec, InstanceImage, InstanceSet, Placement};
use animator_core::codec::{Frame, LatentVideo, PixelVideo, SpaceToDepth};
use animator_core::control::{ConditionBundle, ConditionWeights, ExpertAttention, WeightOverrides, WeightValues, W_BG};
use animator_core::data::{generate_corpus, SceneConfig};
use animator_core::encoders::ProjectedFeature;
use animator_core::model::ColorizationModel;
use animator_core::nn::{tensor_from_f64, to_f64_vec, ParamStore};
use animator_core::schedule::NoiseSchedule;
use animator_core::train::{train, TrainConfig};
use candle_core::{DType, Tensor, Var};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{micro_config, micro_inputs, normal_vec, randomized_model};

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- codec

pub fn measure_codec_round_trip(videos: usize, seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f32;
    for _ in 0..videos {
        let f = [1, 2, 4, 8][rng.random_range(0..4)];
        let (t, h, w) = (rng.random_range(1..5), f * rng.random_range(1..5), f * rng.random_range(1..5));
        let v = PixelVideo::new(Array4::from_shape_fn((t, h, w, 3), |_| rng.random_range(0.0..=1.0))).unwrap();
        let codec = SpaceToDepth::new(f);
        let back = codec.decode(&codec.encode(&v).unwrap()).unwrap();
        worst = v.data.iter().zip(back.data.iter()).map(|(a, b)| (a - b).abs()).fold(worst, f32::max);
    }
    worst
}

// ---- canvas

pub fn random_instance(rng: &mut ChaCha8Rng) -> InstanceImage {
    let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
    let rgb = Array3::from_shape_fn((h, w, 3), |_| rng.random_range(1..=255) as f32 / 255.0);
    let mask = Array2::from_shape_fn((h, w), |_| rng.random_bool(0.75));
    InstanceImage::with_mask(rgb, mask).unwrap()
}

pub fn random_spec(rng: &mut ChaCha8Rng, instances: &InstanceSet) -> CanvasSpec {
    let mut spec = CanvasSpec::new(4 * rng.random_range(2..7), 4 * rng.random_range(2..7));
    for _ in 0..rng.random_range(0..7) {
        let id = &instances.items[rng.random_range(0..instances.len())].id;
        spec = spec.place(Placement {
            instance_id: id.clone(),
            x: rng.random_range(-6..24),
            y: rng.random_range(-6..24),
            scale: [0.5, 1.0, 1.5, 2.0, 3.0][rng.random_range(0..5)],
            z_order: rng.random_range(-2..3),
        });
    }
    spec
}

/// Pixel-major painter's loop: every canvas pixel walks the placements from
/// back to front and keeps the last opaque source pixel that covers it.
pub fn reference_compose(spec: &CanvasSpec, instances: &InstanceSet) -> Frame {
    let mut order: Vec<&Placement> = spec.placements.iter().collect();
    order.sort_by(|a, b| {
        (a.z_order, &a.instance_id, a.y, a.x)
            .cmp(&(b.z_order, &b.instance_id, b.y, b.x))
            .then(a.scale.partial_cmp(&b.scale).unwrap())
    });
    Array3::from_shape_fn((spec.height, spec.width, 3), |(y, x, c)| {
        let mut value = 0.0;
        for p in &order {
            let inst = instances.get(&p.instance_id).unwrap();
            let (ih, iw) = (inst.rgb.dim().0, inst.rgb.dim().1);
            let sh = (ih as f32 * p.scale).round() as i64;
            let sw = (iw as f32 * p.scale).round() as i64;
            let (dy, dx) = (y as i64 - p.y as i64, x as i64 - p.x as i64);
            if dy < 0 || dx < 0 || dy >= sh || dx >= sw {
                continue;
            }
            let sy = (((dy as f32 + 0.5) / p.scale).floor() as usize).min(ih - 1);
            let sx = (((dx as f32 + 0.5) / p.scale).floor() as usize).min(iw - 1);
            if inst.mask[[sy, sx]] {
                value = inst.rgb[[sy, sx, c]];
            }
        }
        value
    })
}

/// Number of random specs whose composite differs from the reference.
pub fn measure_compose_mismatches(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .filter(|_| {
            let mut instances = InstanceSet::new();
            for i in 0..rng.random_range(1..5) {
                instances.push(format!("i{i}"), random_instance(&mut rng));
            }
            let spec = random_spec(&mut rng, &instances);
            animator_core::canvas::compose(&spec, &instances).unwrap() != reference_compose(&spec, &instances)
        })
        .count()
}

// ---- attention

pub struct Fixture {
    pub store: ParamStore,
    pub attn: InstanceAttention,
    pub dim: usize,
    pub heads: usize,
}

pub fn fixture(seed: u64, dim: usize, heads: usize) -> Fixture {
    let store = ParamStore::new(seed, DType::F64);
    let attn = InstanceAttention::new(&store.root().pp("attn"), dim, heads).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in store.names() {
        let n = store.values(&name).unwrap().len();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-0.6..0.6)).collect();
        store.set_values(&name, &v).unwrap();
    }
    Fixture { store, attn, dim, heads }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<f64> {
    (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_layout(rng: &mut ChaCha8Rng, n: usize) -> SegmentLayout {
    SegmentLayout::new(rng.random_range(2..9), (0..n).map(|_| rng.random_range(1..5)).collect())
}

pub fn run(f: &Fixture, x: &[f64], layout: &SegmentLayout, mode: AttentionMode) -> Vec<f64> {
    let t = Tensor::from_slice(x, (layout.total(), f.dim), f.store.device()).unwrap();
    let seq = TokenSequence::new(t, layout.clone()).unwrap();
    to_f64_vec(&f.attn.forward(&seq, mode).unwrap()).unwrap()
}

/// Row-major `(out, in)` matrix and bias applied to row `x`.
fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    (0..b.len())
        .map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * x[i]).sum::<f64>())
        .collect()
}

/// Softmax-weighted sum of value rows for one head, over the listed keys.
fn head_attend(q: &[f64], keys: &[&[f64]], vals: &[&[f64]], head: usize, dk: usize) -> Vec<f64> {
    let scale = 1.0 / (dk as f64).sqrt();
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| (0..dk).map(|j| q[head * dk + j] * k[head * dk + j]).sum::<f64>() * scale)
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    (0..dk)
        .map(|j| e.iter().zip(vals).map(|(w, v)| w / z * v[head * dk + j]).sum())
        .collect()
}

fn projections(f: &Fixture, x: &[f64], rows: usize) -> Vec<Vec<f64>> {
    let wqkv = f.store.values("attn.qkv.weight").unwrap();
    let bqkv = f.store.values("attn.qkv.bias").unwrap();
    (0..rows).map(|r| affine(&wqkv, &bqkv, &x[r * f.dim..(r + 1) * f.dim])).collect()
}

fn out_proj(f: &Fixture, mixed: &[f64]) -> Vec<f64> {
    let wout = f.store.values("attn.out.weight").unwrap();
    let bout = f.store.values("attn.out.bias").unwrap();
    affine(&wout, &bout, mixed)
}

/// Scalar reference for the per-instance mode: joint queries attend over the
/// joint keys plus, separately, over each instance group's keys, and the
/// results add; instance queries attend over joint and their own group.
pub fn brute_force_per_instance(f: &Fixture, x: &[f64], layout: &SegmentLayout) -> Vec<f64> {
    let d = f.dim;
    let dk = d / f.heads;
    let rows = layout.total();
    let proj = projections(f, x, rows);
    let (q, k, v) = (|r: usize| &proj[r][..d], |r: usize| &proj[r][d..2 * d], |r: usize| &proj[r][2 * d..]);
    let joint: Vec<usize> = (0..layout.joint).collect();
    let groups: Vec<Vec<usize>> = layout
        .group_ranges()
        .into_iter()
        .map(|(s, l)| (s..s + l).collect())
        .collect();
    let mut out = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let mut mixed = vec![0.0; d];
        for h in 0..f.heads {
            let key_sets: Vec<Vec<usize>> = if r < layout.joint {
                std::iter::once(joint.clone()).chain(groups.iter().cloned()).collect()
            } else {
                let g = groups.iter().find(|g| g.contains(&r)).unwrap();
                vec![joint.iter().chain(g.iter()).copied().collect()]
            };
            for set in key_sets {
                let ks: Vec<&[f64]> = set.iter().map(|i| k(*i)).collect();
                let vs: Vec<&[f64]> = set.iter().map(|i| v(*i)).collect();
                let a = head_attend(q(r), &ks, &vs, h, dk);
                for j in 0..dk {
                    mixed[h * dk + j] += a[j];
                }
            }
        }
        out.extend(out_proj(f, &mixed));
    }
    out
}

/// Scalar reference for the unified mode: every query attends over the keys
/// the block mask allows.
pub fn brute_force_unified(f: &Fixture, x: &[f64], layout: &SegmentLayout) -> Vec<f64> {
    let d = f.dim;
    let dk = d / f.heads;
    let rows = layout.total();
    let proj = projections(f, x, rows);
    let group_of = |r: usize| -> Option<usize> {
        layout
            .group_ranges()
            .iter()
            .position(|(s, l)| r >= *s && r < s + l)
    };
    let mut out = Vec::new();
    for r in 0..rows {
        let keys: Vec<usize> = (0..rows)
            .filter(|c| match (group_of(r), group_of(*c)) {
                (Some(a), Some(b)) => a == b,
                _ => true,
            })
            .collect();
        let ks: Vec<&[f64]> = keys.iter().map(|i| &proj[*i][d..2 * d]).collect();
        let vs: Vec<&[f64]> = keys.iter().map(|i| &proj[*i][2 * d..]).collect();
        let mut mixed = vec![0.0; d];
        for h in 0..f.heads {
            let a = head_attend(&proj[r][..d], &ks, &vs, h, dk);
            mixed[h * dk..(h + 1) * dk].copy_from_slice(&a);
        }
        out.extend(out_proj(f, &mixed));
    }
    out
}

/// Worst deviation from the scalar reference over `cases` random
/// configurations; instance counts cycle through `counts`.
pub fn measure_attention_oracle(mode: AttentionMode, cases: u64, counts: &[usize], seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = counts[case as usize % counts.len()];
        let heads = if case % 2 == 0 { 2 } else { 4 };
        let f = fixture(seed * 1000 + case, 8, heads);
        let layout = random_layout(&mut rng, n);
        let x = random_tokens(&mut rng, layout.total(), f.dim);
        let got = run(&f, &x, &layout, mode);
        let want = match mode {
            AttentionMode::PerInstance => brute_force_per_instance(&f, &x, &layout),
            AttentionMode::Unified => brute_force_unified(&f, &x, &layout),
        };
        worst = worst.max(max_abs_diff(&got, &want));
    }
    worst
}

/// Largest central-difference derivative of any instance-i output with
/// respect to any instance-j input, i ≠ j.
pub fn measure_cross_instance_gradient(mode: AttentionMode, cases: u64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-4;
    let mut worst = 0.0f64;
    for case in 0..cases {
        let f = fixture(seed * 1000 + case, 8, 2);
        let layout = random_layout(&mut rng, 3);
        let x = random_tokens(&mut rng, layout.total(), f.dim);
        let ranges = layout.group_ranges();
        for (i, (si, li)) in ranges.iter().enumerate() {
            for (j, (sj, lj)) in ranges.iter().enumerate() {
                if i == j {
                    continue;
                }
                for row in *sj..sj + lj {
                    for c in 0..f.dim {
                        let mut plus = x.clone();
                        let mut minus = x.clone();
                        plus[row * f.dim + c] += h;
                        minus[row * f.dim + c] -= h;
                        let (yp, ym) = (run(&f, &plus, &layout, mode), run(&f, &minus, &layout, mode));
                        for r in *si..si + li {
                            for o in 0..f.dim {
                                let g = (yp[r * f.dim + o] - ym[r * f.dim + o]) / (2.0 * h);
                                worst = worst.max(g.abs());
                            }
                        }
                    }
                }
            }
        }
    }
    worst
}

pub fn permute_groups(x: &[f64], layout: &SegmentLayout, perm: &[usize], dim: usize) -> (Vec<f64>, SegmentLayout) {
    let ranges = layout.group_ranges();
    let mut out = x[..layout.joint * dim].to_vec();
    let mut groups = Vec::new();
    for p in perm {
        let (s, l) = ranges[*p];
        out.extend_from_slice(&x[s * dim..(s + l) * dim]);
        groups.push(l);
    }
    (out, SegmentLayout::new(layout.joint, groups))
}

/// Unified-mode outputs under a rotation of the instance groups: the worst
/// joint-row difference and the worst difference of instance rows followed
/// to their new position.
pub fn measure_group_permutation(seed: u64, n: usize) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = fixture(seed, 8, 2);
    let layout = random_layout(&mut rng, n);
    let x = random_tokens(&mut rng, layout.total(), f.dim);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.rotate_left(1 + seed as usize % (n - 1));
    let (px, playout) = permute_groups(&x, &layout, &perm, f.dim);
    let a = run(&f, &x, &layout, AttentionMode::Unified);
    let b = run(&f, &px, &playout, AttentionMode::Unified);
    let j = layout.joint * f.dim;
    let joint = max_abs_diff(&a[..j], &b[..j]);
    let ranges = layout.group_ranges();
    let pranges = playout.group_ranges();
    let mut rows = 0.0f64;
    for (new_pos, old) in perm.iter().enumerate() {
        let (s, l) = ranges[*old];
        let (ps, _) = pranges[new_pos];
        rows = rows.max(max_abs_diff(&a[s * f.dim..(s + l) * f.dim], &b[ps * f.dim..(ps + l) * f.dim]));
    }
    (joint, rows)
}

// ---- full model

pub fn latent(rng: &mut ChaCha8Rng, frames: usize) -> LatentVideo {
    let v: Vec<f32> = normal_vec(rng, frames * 2 * 2 * 48).iter().map(|x| *x as f32).collect();
    LatentVideo {
        data: Array4::from_shape_vec((frames, 2, 2, 48), v).unwrap(),
        scale_factor: 4,
    }
}

/// Whole-model joint predictions with the instance groups rotated, all
/// per-slot weights equal so only the order changes.
pub fn measure_model_permutation(seed: u64) -> f32 {
    let model = randomized_model(micro_config(AttentionMode::Unified), seed, DType::F64);
    let n = model.store.values("control.w_inst").unwrap().len();
    model.store.set_values("control.w_inst", &vec![0.8; n]).unwrap();
    let inputs = micro_inputs(seed, 2, 3);
    let mut shuffled = inputs.clone();
    let mut items = inputs.instances.items.clone();
    items.rotate_left(1);
    shuffled.instances = InstanceSet { items };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = latent(&mut rng, 2);
    let a = model.prepare(&inputs, &WeightOverrides::default()).unwrap();
    let b = model.prepare(&shuffled, &WeightOverrides::default()).unwrap();
    let ea = model.predict_noise(&x, 700, &a).unwrap();
    let eb = model.predict_noise(&x, 700, &b).unwrap();
    ea.data.iter().zip(eb.data.iter()).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max)
}

fn loss_value(model: &ColorizationModel, inputs: &animator_core::ConditionInputs, xt: &Tensor, t: usize, eps: &Tensor) -> f64 {
    let cond = model.prepare(inputs, &WeightOverrides::default()).unwrap();
    let target = model.full_target(eps, &cond).unwrap();
    model.loss(xt, t, &target, &cond).unwrap().to_scalar::<f64>().unwrap()
}

pub struct GradCheck {
    /// Worst relative error over coordinates with a non-negligible gradient.
    pub max_rel: f64,
    /// Worst absolute error over the remaining coordinates.
    pub max_abs_small: f64,
    pub informative: usize,
    pub checked: usize,
}

/// Analytic loss gradients of a randomized 2-block f64 model against central
/// differences on `probes` random parameter coordinates.
pub fn measure_gradient_check(seed: u64, probes: usize) -> GradCheck {
    let h = 1e-5;
    let mode = if seed % 2 == 0 { AttentionMode::Unified } else { AttentionMode::PerInstance };
    let model = randomized_model(micro_config(mode), 10 + seed, DType::F64);
    let inputs = micro_inputs(seed, 2, 1 + seed as usize % 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = 2 * 2 * 2;
    let dev = model.store.device().clone();
    let xt = tensor_from_f64(&normal_vec(&mut rng, rows * 48), &[rows, 48], DType::F64, &dev).unwrap();
    let eps = tensor_from_f64(&normal_vec(&mut rng, rows * 48), &[rows, 48], DType::F64, &dev).unwrap();
    let t = rng.random_range(0..1000);

    let cond = model.prepare(&inputs, &WeightOverrides::default()).unwrap();
    let target = model.full_target(&eps, &cond).unwrap();
    let loss = model.loss(&xt, t, &target, &cond).unwrap();
    let grads = loss.backward().unwrap();

    let vars = model.store.vars();
    let mut out = GradCheck { max_rel: 0.0, max_abs_small: 0.0, informative: 0, checked: 0 };
    for _ in 0..probes {
        let (name, var) = &vars[rng.random_range(0..vars.len())];
        let idx = rng.random_range(0..var.elem_count());
        let analytic = grads
            .get(var.as_tensor())
            .map(|g| to_f64_vec(g).unwrap()[idx])
            .unwrap_or(0.0);
        let base = model.store.values(name).unwrap();
        let mut p = base.clone();
        p[idx] += h;
        model.store.set_values(name, &p).unwrap();
        let lp = loss_value(&model, &inputs, &xt, t, &eps);
        p[idx] -= 2.0 * h;
        model.store.set_values(name, &p).unwrap();
        let lm = loss_value(&model, &inputs, &xt, t, &eps);
        model.store.set_values(name, &base).unwrap();
        let numeric = (lp - lm) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        if scale > 1e-6 {
            out.informative += 1;
            out.max_rel = out.max_rel.max((analytic - numeric).abs() / scale);
        } else {
            out.max_abs_small = out.max_abs_small.max((analytic - numeric).abs());
        }
        out.checked += 1;
    }
    out
}

/// Largest loss change when the instance-token rows of the target are
/// replaced with large random values.
pub fn measure_instance_target_leak(seed: u64, trials: usize) -> f64 {
    let model = randomized_model(micro_config(AttentionMode::Unified), seed, DType::F64);
    let inputs = micro_inputs(seed, 2, 3);
    let cond = model.prepare(&inputs, &WeightOverrides::default()).unwrap();
    let layout = cond.layout().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dev = model.store.device().clone();
    let l = layout.joint;
    let xt = tensor_from_f64(&normal_vec(&mut rng, l * 48), &[l, 48], DType::F64, &dev).unwrap();
    let eps = tensor_from_f64(&normal_vec(&mut rng, l * 48), &[l, 48], DType::F64, &dev).unwrap();
    let target = model.full_target(&eps, &cond).unwrap();
    let base = model.loss(&xt, 300, &target, &cond).unwrap().to_scalar::<f64>().unwrap();
    let extra = layout.total() - l;
    assert!(extra > 0);
    (0..trials)
        .map(|_| {
            let junk = tensor_from_f64(&normal_vec(&mut rng, extra * 48), &[extra, 48], DType::F64, &dev).unwrap();
            let perturbed = Tensor::cat(&[&eps, &(junk * 100.0).unwrap()], 0).unwrap();
            let other = model.loss(&xt, 300, &perturbed, &cond).unwrap().to_scalar::<f64>().unwrap();
            (other - base).abs()
        })
        .fold(0.0, f64::max)
}

// ---- noising

/// Monte-Carlo mean and variance of `add_noise` at step `t`, as distances
/// from the closed form in units of their standard errors.
pub fn measure_noising_moments(t: usize, n: usize) -> (f64, f64) {
    let s = NoiseSchedule::linear_default();
    let x0 = 0.7f64;
    let mut rng = ChaCha8Rng::seed_from_u64(t as u64);
    let clean = LatentVideo { data: Array4::from_elem((1, 1, n, 1), x0 as f32), scale_factor: 4 };
    let eps = normal_vec(&mut rng, n);
    let noise = LatentVideo {
        data: Array4::from_shape_vec((1, 1, n, 1), eps.iter().map(|v| *v as f32).collect()).unwrap(),
        scale_factor: 4,
    };
    let xt = s.add_noise(&clean, t, &noise).unwrap();
    let v: Vec<f64> = xt.data.iter().map(|v| *v as f64).collect();
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let ab = s.alpha_bar(t).unwrap();
    let want_var = 1.0 - ab;
    let se_mean = (want_var / n as f64).sqrt();
    let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
    ((mean - ab.sqrt() * x0).abs() / se_mean, (var - want_var).abs() / se_var)
}

// ---- decoupled control

pub const CONTROL_DIM: usize = 8;

pub struct ControlSetup {
    pub store: ParamStore,
    pub experts: ExpertAttention,
    pub hidden: Tensor,
    pub bg: Var,
    pub inst: Vec<Var>,
    pub text: Var,
}

pub fn control_setup(seed: u64, n: usize) -> ControlSetup {
    let store = ParamStore::new(seed, DType::F64);
    let experts = ExpertAttention::new(&store.root().pp("experts"), CONTROL_DIM, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dev = store.device().clone();
    let mut var =
        |rows: usize| Var::from_vec(normal_vec(&mut rng, rows * CONTROL_DIM), (rows, CONTROL_DIM), &dev).unwrap();
    ControlSetup {
        hidden: var(6).as_tensor().clone(),
        bg: var(3),
        inst: (0..n).map(|_| var(2)).collect(),
        text: var(4),
        experts,
        store,
    }
}

pub fn bundle(s: &ControlSetup, w: &WeightValues) -> ConditionBundle {
    ConditionBundle {
        bg: Some(ProjectedFeature { tokens: s.bg.as_tensor().clone() }),
        instances: s.inst.iter().map(|v| ProjectedFeature { tokens: v.as_tensor().clone() }).collect(),
        text: Some(ProjectedFeature { tokens: s.text.as_tensor().clone() }),
        weights: ConditionWeights::constant(w, DType::F64, s.store.device()).unwrap(),
    }
}

fn h_attn(s: &ControlSetup, w: &WeightValues) -> Vec<f64> {
    to_f64_vec(&s.experts.forward(&s.hidden, &bundle(s, w)).unwrap()).unwrap()
}

fn random_weights(rng: &mut ChaCha8Rng, n: usize) -> WeightValues {
    WeightValues {
        w_bg: rng.random_range(0.0..2.0),
        w_inst: (0..n).map(|_| rng.random_range(0.0..2.0)).collect(),
        w_text: rng.random_range(0.0..2.0),
    }
}

/// `H_attn(x·a + y·b) − (x·H_attn(a) + y·H_attn(b))`, worst entry.
pub fn measure_weight_linearity(cases: u64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let n = case as usize % 4;
        let s = control_setup(seed * 100 + case, n);
        let (a, b) = (random_weights(&mut rng, n), random_weights(&mut rng, n));
        let (x, y) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mixed = WeightValues {
            w_bg: x * a.w_bg + y * b.w_bg,
            w_inst: a.w_inst.iter().zip(&b.w_inst).map(|(p, q)| x * p + y * q).collect(),
            w_text: x * a.w_text + y * b.w_text,
        };
        let lhs = h_attn(&s, &mixed);
        let (ha, hb) = (h_attn(&s, &a), h_attn(&s, &b));
        let rhs: Vec<f64> = ha.iter().zip(&hb).map(|(p, q)| x * p + y * q).collect();
        worst = worst.max(max_abs_diff(&lhs, &rhs));
    }
    worst
}

pub struct ZeroWeightGradients {
    /// Largest |gradient| reaching a condition whose weight is zero.
    pub zeroed: f64,
    /// Smallest max-|gradient| among the conditions left on.
    pub live: f64,
}

/// Zeroes the background, first instance and text weight in turn.
pub fn measure_zero_weight_gradients(seed: u64) -> ZeroWeightGradients {
    let s = control_setup(seed, 2);
    let cases: [(&str, WeightValues); 3] = [
        ("bg", WeightValues { w_bg: 0.0, w_inst: vec![1.0, 1.0], w_text: 1.0 }),
        ("inst0", WeightValues { w_bg: 1.0, w_inst: vec![0.0, 1.0], w_text: 1.0 }),
        ("text", WeightValues { w_bg: 1.0, w_inst: vec![1.0, 1.0], w_text: 0.0 }),
    ];
    let mut out = ZeroWeightGradients { zeroed: 0.0, live: f64::INFINITY };
    for (which, w) in cases {
        let y = s.experts.forward(&s.hidden, &bundle(&s, &w)).unwrap();
        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let largest = |v: &Var| {
            grads
                .get(v.as_tensor())
                .map(|g| to_f64_vec(g).unwrap().iter().fold(0.0f64, |m, x| m.max(x.abs())))
                .unwrap_or(0.0)
        };
        let (zeroed, live) = match which {
            "bg" => (&s.bg, &s.text),
            "inst0" => (&s.inst[0], &s.inst[1]),
            _ => (&s.text, &s.bg),
        };
        out.zeroed = out.zeroed.max(largest(zeroed));
        out.live = out.live.min(largest(live));
    }
    out
}

pub struct FrozenBackground {
    pub bit_identical: bool,
    pub steps_run: usize,
    pub gate_trained: bool,
    pub inst_weights_non_negative: bool,
}

/// Trains a micro model for `steps` optimizer steps and compares the
/// background weight bit for bit.
pub fn measure_frozen_background(steps: usize) -> FrozenBackground {
    let scene = SceneConfig {
        width: 8,
        height: 8,
        frames: 2,
        min_sprites: 1,
        max_sprites: 2,
        min_size: 3,
        max_size: 4,
        max_speed: 0.5,
        allow_overlap: true,
        distinct_colors: false,
    };
    let corpus = generate_corpus(5, 4, &scene).unwrap();
    let config = TrainConfig {
        steps,
        learning_rate: 1e-3,
        checkpoint_every: 0,
        seed: 5,
        ..TrainConfig::default()
    };
    let model_config = micro_config(AttentionMode::Unified);
    let before = ColorizationModel::new(model_config, 5, DType::F32).unwrap();
    let w0 = before.store.values(W_BG).unwrap();
    let out = train(model_config, &config, &corpus, None).unwrap();
    let w1 = out.model.store.values(W_BG).unwrap();
    let i1 = out.model.store.values(animator_core::control::W_INST).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    FrozenBackground {
        bit_identical: bits(&w0) == bits(&w1),
        steps_run: out.losses.len(),
        gate_trained: out.model.store.values("denoiser.block0.gate.g").unwrap()[0] != 0.0,
        inst_weights_non_negative: i1.iter().all(|v| *v >= 0.0),
    }
}
