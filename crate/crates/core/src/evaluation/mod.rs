//! Retrieval evaluation: feature extraction and fusion, Euclidean ranking,
//! junk filtering, average precision, mAP, CMC and the two query/gallery
//! protocols.

pub mod io;

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView1};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, VehicleRecord};
use crate::error::{Error, Result};
use crate::model::{BranchOutputs, Model};
use crate::tensor::{ImageTensor, Real};

/// Gallery sizes of the standard VehicleID test subsets.
pub const VEHICLEID_TEST_SIZES: [usize; 4] = [800, 1600, 2400, 3200];

/// Feature vectors with the record each row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub vectors: Array2<f64>,
    pub meta: Vec<VehicleRecord>,
}

impl FeatureSet {
    pub fn new(vectors: Array2<f64>, meta: Vec<VehicleRecord>) -> Result<Self> {
        if vectors.nrows() == 0 {
            return Err(Error::Protocol("feature set is empty".into()));
        }
        if vectors.nrows() != meta.len() {
            return Err(Error::shape("feature set rows", meta.len(), vectors.nrows()));
        }
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("feature vectors".into()));
        }
        Ok(Self { vectors, meta })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let vectors = self.vectors.select(ndarray::Axis(0), rows);
        Self::new(vectors, rows.iter().map(|&i| self.meta[i].clone()).collect())
    }

    /// Scales every row to unit Euclidean norm (zero rows are left alone).
    pub fn l2_normalized(&self) -> Self {
        let mut out = self.clone();
        for mut row in out.vectors.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row.mapv_inplace(|v| v / norm);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionConfig {
    /// The category half of the fused vector is scaled by `1 - alpha`.
    pub alpha: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { alpha: 0.5 }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("fusion.alpha must be in [0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Which embedding(s) make up the retrieval descriptor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FeatureSource {
    /// `[attr, (1 - α) · category]`.
    #[default]
    Fused,
    Category,
    Attribute,
}

impl std::str::FromStr for FeatureSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Self::Fused),
            "category" => Ok(Self::Category),
            "attribute" => Ok(Self::Attribute),
            other => Err(Error::Config(format!("unknown feature source `{other}` (fused, category, attribute)"))),
        }
    }
}

/// Concatenates the attribute embedding with the down-weighted category
/// embedding, attribute half first.
pub fn fuse<T: Real>(attr: ArrayView1<'_, T>, cat: ArrayView1<'_, T>, fusion: &FusionConfig) -> Vec<f64> {
    let keep = 1.0 - fusion.alpha;
    attr.iter()
        .map(|&v| Real::to_f64(v))
        .chain(cat.iter().map(|&v| Real::to_f64(v) * keep))
        .collect()
}

pub fn descriptor<T: Real>(out: &BranchOutputs<T>, fusion: &FusionConfig, source: FeatureSource) -> Vec<f64> {
    match source {
        FeatureSource::Fused => fuse(out.attr_embedding.view(), out.cat_embedding.view(), fusion),
        FeatureSource::Category => out.cat_embedding.iter().map(|&v| Real::to_f64(v)).collect(),
        FeatureSource::Attribute => out.attr_embedding.iter().map(|&v| Real::to_f64(v)).collect(),
    }
}

/// Fused descriptors of `images`; output dimension is twice the embedding size.
pub fn extract_features(
    model: &Model<f32>,
    images: &[ImageTensor<f32>],
    meta: &[VehicleRecord],
    fusion: &FusionConfig,
) -> Result<FeatureSet> {
    extract_features_from(model, images, meta, fusion, FeatureSource::Fused)
}

pub fn extract_features_from(
    model: &Model<f32>,
    images: &[ImageTensor<f32>],
    meta: &[VehicleRecord],
    fusion: &FusionConfig,
    source: FeatureSource,
) -> Result<FeatureSet> {
    fusion.validate()?;
    if images.len() != meta.len() {
        return Err(Error::shape("extract_features", meta.len(), images.len()));
    }
    let mut rows = Vec::with_capacity(images.len());
    for img in images {
        rows.push(descriptor(&model.forward(img)?, fusion, source));
    }
    let dim = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    let vectors = Array2::from_shape_vec((meta.len(), dim), flat).map_err(|e| Error::Protocol(e.to_string()))?;
    FeatureSet::new(vectors, meta.to_vec())
}

/// Q × G Euclidean distances.
pub fn distance_matrix(queries: &FeatureSet, gallery: &FeatureSet) -> Result<Array2<f64>> {
    if queries.dim() != gallery.dim() {
        return Err(Error::shape("distance_matrix", queries.dim(), gallery.dim()));
    }
    let mut out = Array2::zeros((queries.len(), gallery.len()));
    for (qi, q) in queries.vectors.rows().into_iter().enumerate() {
        for (gi, g) in gallery.vectors.rows().into_iter().enumerate() {
            let d2: f64 = q.iter().zip(g.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            out[[qi, gi]] = d2.sqrt();
        }
    }
    Ok(out)
}

/// `true` = usable. Gallery entries sharing both identity and camera with the
/// query are junk.
pub fn filter_junk(query: &VehicleRecord, gallery_meta: &[VehicleRecord]) -> Vec<bool> {
    gallery_meta
        .iter()
        .map(|g| !(g.vehicle_id == query.vehicle_id && g.camera_id == query.camera_id))
        .collect()
}

/// `Σ_k P(k)·rel(k) / n_gt` over a ranked relevance list.
pub fn average_precision(ranked_relevance: &[bool], n_gt: usize) -> Result<f64> {
    if n_gt == 0 {
        return Err(Error::Protocol("average precision needs at least one ground-truth match".into()));
    }
    if ranked_relevance.is_empty() {
        return Err(Error::Protocol("empty ranking".into()));
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    if hits > n_gt {
        return Err(Error::Protocol(format!("{hits} relevant entries exceed n_gt = {n_gt}")));
    }
    Ok(sum / n_gt as f64)
}

pub fn mean_ap(per_query_ap: &[f64]) -> Result<f64> {
    if per_query_ap.is_empty() {
        return Err(Error::Protocol("no valid queries".into()));
    }
    Ok(per_query_ap.iter().sum::<f64>() / per_query_ap.len() as f64)
}

/// `cmc[k]` = fraction of queries whose first correct match is at rank ≤ k + 1.
pub fn cmc_curve(first_match_ranks: &[usize], max_rank: usize) -> Result<Vec<f64>> {
    if first_match_ranks.is_empty() {
        return Err(Error::Protocol("no queries for CMC".into()));
    }
    if first_match_ranks.contains(&0) {
        return Err(Error::Protocol("ranks are 1-based".into()));
    }
    let mut counts = vec![0usize; max_rank];
    for &r in first_match_ranks {
        if r <= max_rank {
            counts[r - 1] += 1;
        }
    }
    let n = first_match_ranks.len() as f64;
    let mut acc = 0;
    Ok(counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / n
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Protocol {
    /// Query and gallery drawn from one pool; same-identity same-camera gallery
    /// entries are junk.
    VeRi,
    /// Disjoint query and gallery sets; no junk rule.
    VehicleId,
}

impl Protocol {
    pub fn name(&self) -> &'static str {
        match self {
            Protocol::VeRi => "veri",
            Protocol::VehicleId => "vehicleid",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "veri" => Ok(Protocol::VeRi),
            "vehicleid" => Ok(Protocol::VehicleId),
            other => Err(Error::Config(format!("unknown protocol `{other}` (veri, vehicleid)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub protocol: Protocol,
    /// CMC length; defaults to the gallery size.
    pub max_rank: Option<usize>,
    /// L2-normalize features before measuring distances.
    pub normalize: bool,
    /// Recorded in the report; protocols that sample use it.
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            protocol: Protocol::VeRi,
            max_rank: None,
            normalize: false,
            seed: 0,
        }
    }
}

/// Ranking outcome of one query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutcome {
    /// Usable gallery rows, nearest first (ties by row index).
    pub ranking: Vec<usize>,
    pub n_gt: usize,
    /// `None` when the query has no usable ground truth and is dropped.
    pub ap: Option<f64>,
    pub first_match_rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub map: f64,
    pub cmc: Vec<f64>,
    /// AP of every query that has usable ground truth, in query order.
    pub per_query_ap: Vec<f64>,
    pub protocol: String,
    pub seed: u64,
    /// Queries that entered the mean.
    pub num_queries: usize,
    /// Queries dropped for lack of usable ground truth.
    pub num_skipped: usize,
    pub num_gallery: usize,
}

impl EvalReport {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k.saturating_sub(1)).copied().unwrap_or(1.0)
    }
}

pub fn rank_query(distances: ArrayView1<'_, f64>, usable: &[bool]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).filter(|&g| usable[g]).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order
}

pub fn evaluate(queries: &FeatureSet, gallery: &FeatureSet, options: &EvalOptions) -> Result<EvalReport> {
    evaluate_detailed(queries, gallery, options).map(|(r, _)| r)
}

pub fn evaluate_detailed(queries: &FeatureSet, gallery: &FeatureSet, options: &EvalOptions) -> Result<(EvalReport, Vec<QueryOutcome>)> {
    let (q, g) = if options.normalize {
        (queries.l2_normalized(), gallery.l2_normalized())
    } else {
        (queries.clone(), gallery.clone())
    };
    let dist = distance_matrix(&q, &g)?;
    let mut outcomes = Vec::with_capacity(q.len());
    for (qi, query) in q.meta.iter().enumerate() {
        let usable = match options.protocol {
            Protocol::VeRi => filter_junk(query, &g.meta),
            Protocol::VehicleId => vec![true; g.len()],
        };
        let ranking = rank_query(dist.row(qi), &usable);
        let relevance: Vec<bool> = ranking.iter().map(|&gi| g.meta[gi].vehicle_id == query.vehicle_id).collect();
        let n_gt = relevance.iter().filter(|&&r| r).count();
        let (ap, first) = if n_gt == 0 {
            (None, None)
        } else {
            let first = relevance.iter().position(|&r| r).map(|p| p + 1);
            (Some(average_precision(&relevance, n_gt)?), first)
        };
        outcomes.push(QueryOutcome {
            ranking,
            n_gt,
            ap,
            first_match_rank: first,
        });
    }
    let per_query_ap: Vec<f64> = outcomes.iter().filter_map(|o| o.ap).collect();
    let first_ranks: Vec<usize> = outcomes.iter().filter_map(|o| o.first_match_rank).collect();
    let max_rank = options.max_rank.unwrap_or(g.len()).max(1);
    let report = EvalReport {
        map: mean_ap(&per_query_ap)?,
        cmc: cmc_curve(&first_ranks, max_rank)?,
        protocol: options.protocol.name().to_string(),
        seed: options.seed,
        num_queries: per_query_ap.len(),
        num_skipped: outcomes.len() - per_query_ap.len(),
        num_gallery: g.len(),
        per_query_ap,
    };
    Ok((report, outcomes))
}

/// Row indices into a dataset or feature set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolSplit {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
}

fn rows_by_identity(meta: &[VehicleRecord]) -> BTreeMap<u32, Vec<usize>> {
    let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in meta.iter().enumerate() {
        map.entry(r.vehicle_id).or_default().push(i);
    }
    map
}

/// VehicleID protocol: `gallery_size` identities are drawn at random, one
/// random image of each forms the gallery, and all their other images are
/// probes. The standard sizes are [`VEHICLEID_TEST_SIZES`].
pub fn vehicleid_protocol(meta: &[VehicleRecord], gallery_size: usize, seed: u64) -> Result<ProtocolSplit> {
    let groups = rows_by_identity(meta);
    if gallery_size == 0 || groups.len() < gallery_size {
        return Err(Error::Protocol(format!(
            "gallery of {gallery_size} identities requested but the test set has {}",
            groups.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u32> = groups.keys().copied().collect();
    ids.shuffle(&mut rng);
    ids.truncate(gallery_size);
    ids.sort_unstable();
    let mut split = ProtocolSplit {
        queries: Vec::new(),
        gallery: Vec::new(),
    };
    for id in ids {
        let rows = &groups[&id];
        let pick = *rows.choose(&mut rng).expect("identity has rows");
        split.gallery.push(pick);
        split.queries.extend(rows.iter().copied().filter(|&r| r != pick));
    }
    split.queries.sort_unstable();
    split.gallery.sort_unstable();
    Ok(split)
}

/// VeRi-style split of one pool: one random image per identity is a query and
/// the whole pool is the gallery (the junk rule removes the query itself).
pub fn veri_protocol(meta: &[VehicleRecord], seed: u64) -> Result<ProtocolSplit> {
    if meta.is_empty() {
        return Err(Error::Protocol("empty test set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut queries: Vec<usize> = rows_by_identity(meta)
        .values()
        .map(|rows| *rows.choose(&mut rng).expect("identity has rows"))
        .collect();
    queries.sort_unstable();
    Ok(ProtocolSplit {
        queries,
        gallery: (0..meta.len()).collect(),
    })
}

/// Fraction of images whose arg-max colour and type logits match the labels,
/// over labeled images only. Returns `(color_accuracy, type_accuracy)`.
pub fn attribute_accuracy<T: Real>(outputs: &[BranchOutputs<T>], dataset: &Dataset) -> (f64, f64) {
    let mut color = (0usize, 0usize);
    let mut vtype = (0usize, 0usize);
    for (o, r) in outputs.iter().zip(dataset.records()) {
        if let Some(c) = r.color_id {
            color.1 += 1;
            color.0 += usize::from(crate::tensor::argmax(o.color_logits.view()) == c as usize);
        }
        if let Some(t) = r.type_id {
            vtype.1 += 1;
            vtype.0 += usize::from(crate::tensor::argmax(o.type_logits.view()) == t as usize);
        }
    }
    let frac = |(hit, n): (usize, usize)| if n == 0 { 0.0 } else { hit as f64 / n as f64 };
    (frac(color), frac(vtype))
}
