//! The dual-branch attribute-guided network.
//!
//! Both pair members run through one [`Model`]; the siamese branches share
//! every parameter, so a "branch" is just a call to [`Model::forward`]. Within
//! a branch the backbone output forks into an attribute sub-branch (residual
//! block, channel mask, colour and type heads) and a category sub-branch
//! (residual block, mask-guided re-weighting with shortcut, identity head).

pub mod attention;
pub mod checkpoint;
pub mod layers;
pub mod verify;

use ndarray::{Array1, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{all_finite, global_avg_pool, global_avg_pool_backward, FeatureMap, ImageTensor, Real};
pub use attention::{apply_mask, attribute_mask, guided_category_features, ChannelMask};
use layers::{BlockCache, Linear, ParamRef, Parameters, ResidualBlock};
pub use verify::{square_difference, verification_head, VerificationLogits};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Output channels of each stride-2 backbone block.
    pub backbone_channels: Vec<usize>,
    /// Side of the final feature map; the input side is `spatial_size · 2^blocks`.
    pub spatial_size: usize,
    pub num_identities: usize,
    pub num_colors: usize,
    pub num_types: usize,
    pub embedding_dim: usize,
    /// Channels of the attribute feature map, and therefore of the mask.
    pub mask_dim: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![16, 32, 64],
            spatial_size: 4,
            num_identities: 8,
            num_colors: 3,
            num_types: 2,
            embedding_dim: 64,
            mask_dim: 64,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_channels.is_empty() {
            return Err(Error::Config("model.backbone_channels must list at least one block".into()));
        }
        if let Some(i) = self.backbone_channels.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("model.backbone_channels[{i}] must be positive")));
        }
        for (name, v) in [
            ("model.spatial_size", self.spatial_size),
            ("model.num_identities", self.num_identities),
            ("model.num_colors", self.num_colors),
            ("model.num_types", self.num_types),
            ("model.embedding_dim", self.embedding_dim),
            ("model.mask_dim", self.mask_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn image_side(&self) -> usize {
        self.spatial_size << self.backbone_channels.len()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("validated")
    }

    /// Stable `key=value` rendering, used as the checkpoint config echo.
    pub fn to_kv(&self) -> String {
        let channels: Vec<String> = self.backbone_channels.iter().map(ToString::to_string).collect();
        format!(
            "backbone_channels={}\nspatial_size={}\nnum_identities={}\nnum_colors={}\nnum_types={}\nembedding_dim={}\nmask_dim={}\nseed={}\n",
            channels.join(","),
            self.spatial_size,
            self.num_identities,
            self.num_colors,
            self.num_types,
            self.embedding_dim,
            self.mask_dim,
            self.seed
        )
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed config line `{line}`")))?;
            let num = |v: &str| -> Result<usize> {
                v.trim().parse().map_err(|_| Error::Config(format!("{key}: `{v}` is not an integer")))
            };
            match key.trim() {
                "backbone_channels" => {
                    cfg.backbone_channels = value.split(',').map(num).collect::<Result<_>>()?;
                }
                "spatial_size" => cfg.spatial_size = num(value)?,
                "num_identities" => cfg.num_identities = num(value)?,
                "num_colors" => cfg.num_colors = num(value)?,
                "num_types" => cfg.num_types = num(value)?,
                "embedding_dim" => cfg.embedding_dim = num(value)?,
                "mask_dim" => cfg.mask_dim = num(value)?,
                "seed" => cfg.seed = num(value)? as u64,
                other => return Err(Error::Config(format!("unknown model key `{other}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// All learnable tensors of the network. The same type doubles as the
/// gradient accumulator and the optimizer velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct AgNetParams<T> {
    pub backbone: Vec<ResidualBlock<T>>,
    pub attr_block: ResidualBlock<T>,
    pub mask_conv: Linear<T>,
    pub attr_embed: Linear<T>,
    pub color_head: Linear<T>,
    pub type_head: Linear<T>,
    pub cat_block: ResidualBlock<T>,
    pub guide_conv: Linear<T>,
    pub cat_embed: Linear<T>,
    pub id_head: Linear<T>,
    pub verify_head: Linear<T>,
}

impl<T: Real> AgNetParams<T> {
    fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut backbone = Vec::with_capacity(config.backbone_channels.len());
        let mut in_ch = 3;
        for &out_ch in &config.backbone_channels {
            backbone.push(ResidualBlock::random(in_ch, out_ch, 2, &mut rng));
            in_ch = out_ch;
        }
        let c = config.feature_channels();
        let (m, d) = (config.mask_dim, config.embedding_dim);
        let lecun = |n: usize| (1.0 / n as f64).sqrt();
        let attr_block = ResidualBlock::random(c, m, 1, &mut rng);
        let mask_conv = Linear::random(m, m, lecun(m), &mut rng);
        let attr_embed = Linear::random(m, d, lecun(m), &mut rng);
        let color_head = Linear::random(d, config.num_colors, lecun(d), &mut rng);
        let type_head = Linear::random(d, config.num_types, lecun(d), &mut rng);
        let cat_block = ResidualBlock::random(c, c, 1, &mut rng);
        let guide_conv = Linear::random(m, c, lecun(m), &mut rng);
        let cat_embed = Linear::random(c, d, lecun(c), &mut rng);
        let id_head = Linear::random(d, config.num_identities, lecun(d), &mut rng);
        let verify_head = Linear::random(d, 2, lecun(d), &mut rng);
        Self {
            backbone,
            attr_block,
            mask_conv,
            attr_embed,
            color_head,
            type_head,
            cat_block,
            guide_conv,
            cat_embed,
            id_head,
            verify_head,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let z = |l: &Linear<T>| Linear::zeros(l.inputs(), l.outputs());
        Self {
            backbone: self.backbone.iter().map(ResidualBlock::zeros_like).collect(),
            attr_block: self.attr_block.zeros_like(),
            mask_conv: z(&self.mask_conv),
            attr_embed: z(&self.attr_embed),
            color_head: z(&self.color_head),
            type_head: z(&self.type_head),
            cat_block: self.cat_block.zeros_like(),
            guide_conv: z(&self.guide_conv),
            cat_embed: z(&self.cat_embed),
            id_head: z(&self.id_head),
            verify_head: z(&self.verify_head),
        }
    }

    pub fn params(&self) -> Vec<ParamRef<'_, T>> {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = Vec::new();
        self.collect_params_mut("", &mut out);
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// `self += other`, tensor by tensor.
    pub fn accumulate(&mut self, other: &Self) {
        let src = other.params();
        for ((_, dst), p) in self.params_mut().into_iter().zip(src) {
            for (d, &s) in dst.iter_mut().zip(p.data) {
                *d += s;
            }
        }
    }

    /// Element-wise cast, e.g. to run the same network in double precision.
    pub fn cast<U: Real>(&self, config: &ModelConfig) -> AgNetParams<U> {
        let mut out = AgNetParams::<U>::init(config);
        let src = self.params();
        for ((_, dst), p) in out.params_mut().into_iter().zip(src) {
            for (d, &s) in dst.iter_mut().zip(p.data) {
                *d = U::from_f64(s.to_f64());
            }
        }
        out
    }
}

impl<T: Real> Parameters<T> for AgNetParams<T> {
    fn collect_params<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        let p = |name: &str| if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
        for (i, b) in self.backbone.iter().enumerate() {
            b.collect_params(&p(&format!("backbone.{i}")), out);
        }
        self.attr_block.collect_params(&p("attr_block"), out);
        self.mask_conv.collect_params(&p("mask_conv"), out);
        self.attr_embed.collect_params(&p("attr_embed"), out);
        self.color_head.collect_params(&p("color_head"), out);
        self.type_head.collect_params(&p("type_head"), out);
        self.cat_block.collect_params(&p("cat_block"), out);
        self.guide_conv.collect_params(&p("guide_conv"), out);
        self.cat_embed.collect_params(&p("cat_embed"), out);
        self.id_head.collect_params(&p("id_head"), out);
        self.verify_head.collect_params(&p("verify_head"), out);
    }

    fn collect_params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [T])>) {
        let p = |name: &str| if prefix.is_empty() { name.to_string() } else { format!("{prefix}.{name}") };
        for (i, b) in self.backbone.iter_mut().enumerate() {
            b.collect_params_mut(&p(&format!("backbone.{i}")), out);
        }
        self.attr_block.collect_params_mut(&p("attr_block"), out);
        self.mask_conv.collect_params_mut(&p("mask_conv"), out);
        self.attr_embed.collect_params_mut(&p("attr_embed"), out);
        self.color_head.collect_params_mut(&p("color_head"), out);
        self.type_head.collect_params_mut(&p("type_head"), out);
        self.cat_block.collect_params_mut(&p("cat_block"), out);
        self.guide_conv.collect_params_mut(&p("guide_conv"), out);
        self.cat_embed.collect_params_mut(&p("cat_embed"), out);
        self.id_head.collect_params_mut(&p("id_head"), out);
        self.verify_head.collect_params_mut(&p("verify_head"), out);
    }
}

/// Everything one branch pass produces for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchOutputs<T> {
    pub id_logits: Array1<T>,
    pub color_logits: Array1<T>,
    pub type_logits: Array1<T>,
    pub attr_embedding: Array1<T>,
    pub cat_embedding: Array1<T>,
    pub mask: ChannelMask<T>,
}

/// Upstream gradients for the outputs of one branch pass. Embedding
/// gradients come from the verification head.
#[derive(Debug, Clone)]
pub struct BranchGrads<T> {
    pub id_logits: Array1<T>,
    pub color_logits: Array1<T>,
    pub type_logits: Array1<T>,
    pub attr_embedding: Array1<T>,
    pub cat_embedding: Array1<T>,
}

impl<T: Real> BranchGrads<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            id_logits: Array1::zeros(config.num_identities),
            color_logits: Array1::zeros(config.num_colors),
            type_logits: Array1::zeros(config.num_types),
            attr_embedding: Array1::zeros(config.embedding_dim),
            cat_embedding: Array1::zeros(config.embedding_dim),
        }
    }
}

/// Intermediate activations retained for the backward pass.
pub struct ForwardCache<T> {
    backbone: Vec<BlockCache<T>>,
    f_g_dim: (usize, usize, usize),
    attr_block: BlockCache<T>,
    f_r: FeatureMap<T>,
    pooled_m: Array1<T>,
    cat_block: BlockCache<T>,
    f_c: FeatureMap<T>,
    pooled_cs: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    config: ModelConfig,
    pub params: AgNetParams<T>,
}

/// Builds the network with parameters drawn deterministically from `config.seed`.
pub fn build_model<T: Real>(config: ModelConfig) -> Result<Model<T>> {
    Model::new(config)
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = AgNetParams::init(&config);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: AgNetParams<T>) -> Result<Self> {
        config.validate()?;
        let reference = AgNetParams::<T>::init(&config);
        let expected: Vec<_> = reference.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
        let got: Vec<_> = params.params().iter().map(|p| (p.name.clone(), p.shape.clone())).collect();
        if expected != got {
            return Err(Error::Config("parameter layout does not match model config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(&self.config),
        }
    }

    fn check_image(&self, image: &ImageTensor<T>) -> Result<()> {
        let side = self.config.image_side();
        if image.dim() != (3, side, side) {
            return Err(Error::shape("forward_branch image", format!("(3, {side}, {side})"), format!("{:?}", image.dim())));
        }
        if !all_finite(image.iter()) {
            return Err(Error::NonFinite("input image".into()));
        }
        Ok(())
    }

    /// One branch pass in inference mode.
    pub fn forward(&self, image: &ImageTensor<T>) -> Result<BranchOutputs<T>> {
        self.forward_with_cache(image).map(|(out, _)| out)
    }

    pub fn forward_batch(&self, images: &[ImageTensor<T>]) -> Result<Vec<BranchOutputs<T>>> {
        images.iter().map(|img| self.forward(img)).collect()
    }

    pub fn forward_with_cache(&self, image: &ImageTensor<T>) -> Result<(BranchOutputs<T>, ForwardCache<T>)> {
        self.check_image(image)?;
        let p = &self.params;

        let mut x = image.clone();
        let mut backbone = Vec::with_capacity(p.backbone.len());
        for block in &p.backbone {
            let (y, cache) = block.forward(&x);
            backbone.push(cache);
            x = y;
        }
        let f_g = x;

        let (f_r, attr_cache) = p.attr_block.forward(&f_g);
        let mask = attribute_mask(&f_r, &p.mask_conv)?;
        let f_m = apply_mask(&f_r, &mask)?;
        let pooled_m = global_avg_pool(&f_m);
        let attr_embedding = p.attr_embed.forward(pooled_m.view());
        let color_logits = p.color_head.forward(attr_embedding.view());
        let type_logits = p.type_head.forward(attr_embedding.view());

        let (f_c, cat_cache) = p.cat_block.forward(&f_g);
        let f_cs = guided_category_features(&f_c, &mask, &p.guide_conv)?;
        let pooled_cs = global_avg_pool(&f_cs);
        let cat_embedding = p.cat_embed.forward(pooled_cs.view());
        let id_logits = p.id_head.forward(cat_embedding.view());

        let outputs = BranchOutputs {
            id_logits,
            color_logits,
            type_logits,
            attr_embedding,
            cat_embedding,
            mask,
        };
        if ![&outputs.id_logits, &outputs.color_logits, &outputs.type_logits]
            .iter()
            .all(|v| all_finite(v.iter()))
        {
            return Err(Error::NonFinite("branch logits".into()));
        }
        let cache = ForwardCache {
            backbone,
            f_g_dim: f_g.dim(),
            attr_block: attr_cache,
            f_r,
            pooled_m,
            cat_block: cat_cache,
            f_c,
            pooled_cs,
        };
        Ok((outputs, cache))
    }

    /// Back-propagates one branch pass, accumulating parameter gradients into `grads`.
    pub fn backward(&self, outputs: &BranchOutputs<T>, cache: &ForwardCache<T>, upstream: &BranchGrads<T>, grads: &mut AgNetParams<T>) {
        let p = &self.params;
        let (_, h, w) = cache.f_r.dim();

        // attribute sub-branch
        let mut d_attr = upstream.attr_embedding.clone();
        d_attr += &p.color_head.backward(outputs.attr_embedding.view(), upstream.color_logits.view(), &mut grads.color_head);
        d_attr += &p.type_head.backward(outputs.attr_embedding.view(), upstream.type_logits.view(), &mut grads.type_head);
        let d_pooled_m = p.attr_embed.backward(cache.pooled_m.view(), d_attr.view(), &mut grads.attr_embed);
        let d_f_m = global_avg_pool_backward(d_pooled_m.view(), h, w);
        let (mut d_f_r, mut d_mask) = attention::apply_mask_backward(&cache.f_r, &outputs.mask, &d_f_m);

        // category sub-branch
        let mut d_cat = upstream.cat_embedding.clone();
        d_cat += &p.id_head.backward(outputs.cat_embedding.view(), upstream.id_logits.view(), &mut grads.id_head);
        let d_pooled_cs = p.cat_embed.backward(cache.pooled_cs.view(), d_cat.view(), &mut grads.cat_embed);
        let (_, hc, wc) = cache.f_c.dim();
        let d_f_cs = global_avg_pool_backward(d_pooled_cs.view(), hc, wc);
        let (d_f_c, d_mask_guide) = attention::guided_category_features_backward(
            &cache.f_c,
            &outputs.mask,
            &p.guide_conv,
            &d_f_cs,
            &mut grads.guide_conv,
        );
        d_mask += &d_mask_guide;

        d_f_r += &attention::attribute_mask_backward(&cache.f_r, &p.mask_conv, &outputs.mask, d_mask.view(), &mut grads.mask_conv);

        let mut d_f_g = p.attr_block.backward(&cache.attr_block, &d_f_r, &mut grads.attr_block);
        d_f_g += &p.cat_block.backward(&cache.cat_block, &d_f_c, &mut grads.cat_block);
        debug_assert_eq!(d_f_g.dim(), cache.f_g_dim);

        let mut d = d_f_g;
        for (i, block) in p.backbone.iter().enumerate().rev() {
            d = block.backward(&cache.backbone[i], &d, &mut grads.backbone[i]);
        }
    }

    /// Verification logits for an embedding pair, using this model's head.
    pub fn verify(&self, f1: ArrayView1<'_, T>, f2: ArrayView1<'_, T>) -> Result<VerificationLogits<T>> {
        verification_head(f1, f2, &self.params.verify_head)
    }
}

/// Returns the channel index of the largest mask weight; handy for inspection.
pub fn dominant_channel<T: Real>(mask: &ChannelMask<T>) -> usize {
    crate::tensor::argmax(mask.weights())
}
