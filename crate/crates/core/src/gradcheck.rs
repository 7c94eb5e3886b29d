//! Central finite-difference verification of the hand-written backward passes.
//!
//! Each check draws random inputs in double precision, contracts the op's
//! output with a random readout vector to obtain a scalar, and compares the
//! analytic gradient against `(f(x + h) - f(x - h)) / 2h` coordinate by
//! coordinate. The error of one instance is the norm-wise relative error
//! `‖a − n‖ / max(‖a‖ + ‖n‖, 1e-12)`.

use ndarray::{Array1, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{als_loss, als_loss_from_logits, softmax as softmax_vec, AlsParams, PairContext};
use crate::model::attention::{
    attribute_mask, attribute_mask_backward, guided_category_features, guided_category_features_backward, ChannelMask,
};
use crate::model::layers::Linear;
use crate::model::verify::{verification_head, verification_head_backward};
use crate::model::{BranchGrads, Model, ModelConfig};

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    pub instances: usize,
    pub step: f64,
    pub seed: u64,
    /// Sizes of the op-level checks are taken from this config.
    pub config: ModelConfig,
    /// Parameter coordinates sampled per tensor in the whole-network check.
    pub coords_per_tensor: usize,
    /// Instances of the whole-network check.
    pub branch_instances: usize,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            instances: 20,
            step: DEFAULT_STEP,
            seed: 0,
            config: ModelConfig::default(),
            coords_per_tensor: 3,
            branch_instances: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub max_relative_error: f64,
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-12)
}

/// Central differences of `f` at `x`, restricted to `coords` (all when `None`).
pub fn numeric_gradient(x: &[f64], step: f64, coords: Option<&[usize]>, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let all: Vec<usize>;
    let idx = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    idx.iter()
        .map(|&i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

fn random_linear(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize) -> Linear<f64> {
    let scale = 1.0 / (inputs as f64).sqrt();
    Linear {
        weight: Array2::from_shape_vec((outputs, inputs), uniform_vec(rng, inputs * outputs, scale)).unwrap(),
        bias: Array1::from(uniform_vec(rng, outputs, 0.5)),
    }
}

fn unpack_linear(v: &[f64], inputs: usize, outputs: usize) -> Linear<f64> {
    let (w, b) = v.split_at(inputs * outputs);
    Linear {
        weight: Array2::from_shape_vec((outputs, inputs), w.to_vec()).unwrap(),
        bias: Array1::from(b.to_vec()),
    }
}

fn pack_linear(l: &Linear<f64>) -> Vec<f64> {
    l.weight.iter().chain(l.bias.iter()).copied().collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// ALS loss through softmax, 10 classes, all three ε cases.
pub fn check_als(settings: &GradCheckSettings) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0xA15);
    let classes = 10;
    let mut worst: f64 = 0.0;
    for i in 0..settings.instances {
        let logits = uniform_vec(&mut rng, classes, 2.0);
        let target = rng.random_range(0..classes);
        let ctx = match i % 3 {
            0 => PairContext { id1: 1, id2: 1, attr1: Some((0, 0)), attr2: Some((0, 0)) },
            1 => PairContext { id1: 1, id2: 2, attr1: Some((0, 1)), attr2: Some((0, 1)) },
            _ => PairContext { id1: 1, id2: 2, attr1: Some((0, 1)), attr2: Some((2, 1)) },
        };
        let params = AlsParams {
            theta: rng.random_range(0.0..1.0),
            alpha: rng.random_range(0.0..0.5),
            beta: rng.random_range(0.1..2.0),
        };
        let (_, analytic) = als_loss_from_logits(&logits, target, &ctx, &params).expect("valid instance");
        let numeric = numeric_gradient(&logits, settings.step, None, |z| {
            als_loss(&softmax_vec(z), target, &ctx, &params).expect("valid instance")
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    OpReport { op: "als_loss", instances: settings.instances, max_relative_error: worst }
}

/// Mask w.r.t. the attribute feature map and the 1×1 convolution.
pub fn check_attribute_mask(settings: &GradCheckSettings) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x3A5C);
    let c = settings.config.mask_dim;
    let s = settings.config.spatial_size;
    let n_map = c * s * s;
    let mut worst: f64 = 0.0;
    for _ in 0..settings.instances {
        let f_r = Array3::from_shape_vec((c, s, s), uniform_vec(&mut rng, n_map, 1.0)).unwrap();
        let conv = random_linear(&mut rng, c, c);
        let readout = uniform_vec(&mut rng, c, 1.0);

        let mask = attribute_mask(&f_r, &conv).unwrap();
        let mut grad = Linear::zeros(c, c);
        let d_f = attribute_mask_backward(&f_r, &conv, &mask, Array1::from(readout.clone()).view(), &mut grad);
        let analytic: Vec<f64> = d_f.iter().copied().chain(pack_linear(&grad)).collect();

        let x: Vec<f64> = f_r.iter().copied().chain(pack_linear(&conv)).collect();
        let numeric = numeric_gradient(&x, settings.step, None, |v| {
            let (fm, lp) = v.split_at(n_map);
            let f = Array3::from_shape_vec((c, s, s), fm.to_vec()).unwrap();
            let m = attribute_mask(&f, &unpack_linear(lp, c, c)).unwrap();
            dot(m.weights().as_slice().unwrap(), &readout)
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    OpReport { op: "attribute_mask", instances: settings.instances, max_relative_error: worst }
}

/// Guided category features w.r.t. the category map, the mask logits and the
/// guide convolution.
pub fn check_guided_category_features(settings: &GradCheckSettings) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x6D1);
    let c = settings.config.feature_channels();
    let m = settings.config.mask_dim;
    let s = settings.config.spatial_size;
    let n_map = c * s * s;
    let mut worst: f64 = 0.0;
    for _ in 0..settings.instances {
        let f_c = Array3::from_shape_vec((c, s, s), uniform_vec(&mut rng, n_map, 1.0)).unwrap();
        let mask_logits = uniform_vec(&mut rng, m, 2.0);
        let guide = random_linear(&mut rng, m, c);
        let readout = Array3::from_shape_vec((c, s, s), uniform_vec(&mut rng, n_map, 1.0)).unwrap();

        let mask = ChannelMask::from_logits(Array1::from(mask_logits.clone()).view());
        let mut grad = Linear::zeros(m, c);
        let (d_f, d_mask) = guided_category_features_backward(&f_c, &mask, &guide, &readout, &mut grad);
        let d_logits = crate::tensor::softmax_backward(mask.weights(), d_mask.view());
        let analytic: Vec<f64> = d_f.iter().copied().chain(d_logits.iter().copied()).chain(pack_linear(&grad)).collect();

        let x: Vec<f64> = f_c.iter().copied().chain(mask_logits.iter().copied()).chain(pack_linear(&guide)).collect();
        let numeric = numeric_gradient(&x, settings.step, None, |v| {
            let (fm, rest) = v.split_at(n_map);
            let (ml, lp) = rest.split_at(m);
            let f = Array3::from_shape_vec((c, s, s), fm.to_vec()).unwrap();
            let mk = ChannelMask::from_logits(Array1::from(ml.to_vec()).view());
            let out = guided_category_features(&f, &mk, &unpack_linear(lp, m, c)).unwrap();
            out.iter().zip(readout.iter()).map(|(a, b)| a * b).sum()
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    OpReport { op: "guided_category_features", instances: settings.instances, max_relative_error: worst }
}

/// Verification head w.r.t. both embeddings and the projection.
pub fn check_verification_head(settings: &GradCheckSettings) -> OpReport {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0x7E1F);
    let d = settings.config.embedding_dim;
    let mut worst: f64 = 0.0;
    for _ in 0..settings.instances {
        let f1 = uniform_vec(&mut rng, d, 1.0);
        let f2 = uniform_vec(&mut rng, d, 1.0);
        let head = random_linear(&mut rng, d, 2);
        let readout = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];

        let mut grad = Linear::zeros(d, 2);
        let (d1, d2) = verification_head_backward(
            Array1::from(f1.clone()).view(),
            Array1::from(f2.clone()).view(),
            &head,
            readout,
            &mut grad,
        );
        let analytic: Vec<f64> = d1.iter().chain(d2.iter()).copied().chain(pack_linear(&grad)).collect();

        let x: Vec<f64> = f1.iter().chain(f2.iter()).copied().chain(pack_linear(&head)).collect();
        let numeric = numeric_gradient(&x, settings.step, None, |v| {
            let (a, rest) = v.split_at(d);
            let (b, lp) = rest.split_at(d);
            let out = verification_head(
                Array1::from(a.to_vec()).view(),
                Array1::from(b.to_vec()).view(),
                &unpack_linear(lp, d, 2),
            )
            .unwrap();
            out.values[0] * readout[0] + out.values[1] * readout[1]
        });
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    OpReport { op: "verification_head", instances: settings.instances, max_relative_error: worst }
}

/// Whole branch pass (backbone, both sub-branches, mask and guide) w.r.t.
/// sampled parameter coordinates of every tensor.
pub fn check_branch(settings: &GradCheckSettings, instances: usize) -> Result<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed ^ 0xB4A);
    let mut worst: f64 = 0.0;
    for inst in 0..instances {
        let config = ModelConfig { seed: settings.config.seed.wrapping_add(inst as u64), ..settings.config.clone() };
        let mut model = Model::<f64>::new(config.clone())?;
        // Biases start at zero; randomize them so their gradients are exercised too.
        for (name, data) in model.params.params_mut() {
            if name.ends_with("bias") {
                data.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
            }
        }
        let side = config.image_side();
        let image = Array3::from_shape_vec((3, side, side), uniform_vec(&mut rng, 3 * side * side, 1.0)).unwrap();
        let upstream = BranchGrads {
            id_logits: Array1::from(uniform_vec(&mut rng, config.num_identities, 1.0)),
            color_logits: Array1::from(uniform_vec(&mut rng, config.num_colors, 1.0)),
            type_logits: Array1::from(uniform_vec(&mut rng, config.num_types, 1.0)),
            attr_embedding: Array1::from(uniform_vec(&mut rng, config.embedding_dim, 1.0)),
            cat_embedding: Array1::from(uniform_vec(&mut rng, config.embedding_dim, 1.0)),
        };
        let readout = |m: &Model<f64>| -> f64 {
            let o = m.forward(&image).expect("valid image");
            o.id_logits.dot(&upstream.id_logits)
                + o.color_logits.dot(&upstream.color_logits)
                + o.type_logits.dot(&upstream.type_logits)
                + o.attr_embedding.dot(&upstream.attr_embedding)
                + o.cat_embedding.dot(&upstream.cat_embedding)
        };

        let (outputs, cache) = model.forward_with_cache(&image)?;
        let mut grads = model.params.zeros_like();
        model.backward(&outputs, &cache, &upstream, &mut grads);

        let grad_flat: Vec<f64> = grads.params().iter().flat_map(|p| p.data.iter().copied()).collect();
        let mut coords = Vec::new();
        let mut offset = 0;
        for p in model.params.params() {
            for _ in 0..settings.coords_per_tensor.min(p.data.len()) {
                coords.push(offset + rng.random_range(0..p.data.len()));
            }
            offset += p.data.len();
        }
        let analytic: Vec<f64> = coords.iter().map(|&i| grad_flat[i]).collect();

        let flat: Vec<f64> = model.params.params().iter().flat_map(|p| p.data.iter().copied()).collect();
        let probe = std::cell::RefCell::new(model.clone());
        let numeric = numeric_gradient(&flat, settings.step, Some(&coords), |v| {
            let mut m = probe.borrow_mut();
            let mut it = v.iter();
            for (_, dst) in m.params.params_mut() {
                for d in dst.iter_mut() {
                    *d = *it.next().unwrap();
                }
            }
            readout(&m)
        });
        worst = worst.max(relative_error(&analytic, &numeric));
        model.params = probe.into_inner().params;
    }
    Ok(OpReport { op: "branch_backward", instances, max_relative_error: worst })
}

/// Runs every op-level check plus a whole-branch check.
pub fn run_all(settings: &GradCheckSettings) -> Result<Vec<OpReport>> {
    Ok(vec![
        check_als(settings),
        check_attribute_mask(settings),
        check_guided_category_features(settings),
        check_verification_head(settings),
        check_branch(settings, settings.branch_instances)?,
    ])
}
