//! Desk-scale stereo network: a residual feature extractor, a concatenation
//! cost volume, a small 3D matching head and soft-argmin regression.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ConvSpec, Graph, Var};
use crate::config::KeyValues;
use crate::error::{ensure_arg, Error, Result};
use crate::imagecore::{DisparityMap, Image};
use crate::tensor::Tensor;

const LEAK: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub feature_channels: usize,
    /// Spatial reduction of the extractor output: 1, 2 or 4.
    pub feature_stride: usize,
    pub num_extractor_blocks: usize,
    pub matching_channels: usize,
    /// Disparity range in full-resolution pixels.
    pub d_max: usize,
    pub init_seed: u64,
    /// Group normalization after every hidden convolution; 0 disables it.
    #[serde(default)]
    pub norm_groups: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 3,
            feature_channels: 16,
            feature_stride: 4,
            num_extractor_blocks: 4,
            matching_channels: 16,
            d_max: 64,
            init_seed: 0,
            norm_groups: 0,
        }
    }
}

impl NetworkConfig {
    pub fn cost_levels(&self) -> usize {
        self.d_max / self.feature_stride
    }

    /// Smallest `d_max` whose top hypothesis, `stride * (cost_levels - 1)`, reaches `range`.
    pub fn covering(mut self, range: usize) -> Self {
        self.d_max = (range.div_ceil(self.feature_stride) + 1) * self.feature_stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(
            matches!(self.feature_stride, 1 | 2 | 4),
            "feature_stride must be 1, 2 or 4"
        );
        ensure_arg!(
            self.d_max > 0 && self.d_max % self.feature_stride == 0,
            "d_max {} must be a positive multiple of feature_stride {}",
            self.d_max,
            self.feature_stride
        );
        ensure_arg!(
            self.in_channels > 0 && self.feature_channels > 0 && self.matching_channels > 0,
            "channel counts must be positive"
        );
        ensure_arg!(
            self.norm_groups == 0
                || (self.feature_channels % self.norm_groups == 0 && self.matching_channels % self.norm_groups == 0),
            "norm_groups {} must divide feature_channels and matching_channels",
            self.norm_groups
        );
        Ok(())
    }

    pub const KEYS: [&'static str; 8] = [
        "in_channels",
        "feature_channels",
        "feature_stride",
        "num_extractor_blocks",
        "matching_channels",
        "d_max",
        "init_seed",
        "norm_groups",
    ];

    /// Overrides fields present in `kv`.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        macro_rules! take {
            ($($f:ident),*) => {$(
                if let Some(v) = kv.get(stringify!($f))? { self.$f = v; }
            )*};
        }
        take!(in_channels, feature_channels, feature_stride, num_extractor_blocks, matching_channels, d_max, init_seed, norm_groups);
        self.validate()
    }
}

/// Extractor output: `[C, H/stride, W/stride]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
    stride: usize,
}

impl FeatureMap {
    pub fn new(data: Tensor, stride: usize) -> Result<Self> {
        ensure_arg!(data.shape().len() == 3, "feature map must be [C, H, W]");
        ensure_arg!(data.all_finite(), "feature map has non-finite values");
        Ok(FeatureMap { data, stride })
    }

    /// The image itself as a stride-1 feature map.
    pub fn from_image(img: &Image) -> Self {
        FeatureMap {
            data: img.to_tensor(),
            stride: 1,
        }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }
}

/// `[2C, D, h, w]` concatenation volume.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume {
    data: Tensor,
    stride: usize,
}

impl CostVolume {
    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn levels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }
}

/// Named parameter arrays in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Places every array on the tape, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }
}

/// Parameters of the feature extractor and of the matching module.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub extractor: ParamSet,
    pub matcher: ParamSet,
}

enum Fill {
    /// Fan-in scaled uniform with this gain.
    Uniform(f64),
    Const(f64),
}

struct LayerInit {
    name: String,
    shape: Vec<usize>,
    fill: Fill,
}

fn conv_layer(name: impl Into<String>, shape: &[usize], gain: f64) -> Vec<LayerInit> {
    let name = name.into();
    vec![
        LayerInit { name: format!("{name}.weight"), shape: shape.to_vec(), fill: Fill::Uniform(gain) },
        LayerInit { name: format!("{name}.bias"), shape: vec![shape[0]], fill: Fill::Const(0.0) },
    ]
}

/// A convolution followed by group normalization when `groups > 0`.
fn normed_layer(name: impl Into<String>, shape: &[usize], gain: f64, groups: usize) -> Vec<LayerInit> {
    let name = name.into();
    let mut layers = conv_layer(name.clone(), shape, gain);
    if groups > 0 {
        layers.push(LayerInit { name: format!("{name}.norm.gamma"), shape: vec![shape[0]], fill: Fill::Const(1.0) });
        layers.push(LayerInit { name: format!("{name}.norm.beta"), shape: vec![shape[0]], fill: Fill::Const(0.0) });
    }
    layers
}

fn extractor_layout(cfg: &NetworkConfig) -> Vec<LayerInit> {
    let c = cfg.feature_channels;
    let (relu_gain, n) = (2f64.sqrt(), cfg.norm_groups);
    let mut layers = Vec::new();
    layers.extend(normed_layer("stem1", &[c, cfg.in_channels, 3, 3], relu_gain, n));
    layers.extend(normed_layer("stem2", &[c, c, 3, 3], relu_gain, n));
    for b in 0..cfg.num_extractor_blocks {
        layers.extend(normed_layer(format!("block{b}.conv1"), &[c, c, 3, 3], relu_gain, n));
        layers.extend(normed_layer(format!("block{b}.conv2"), &[c, c, 3, 3], 0.5, n));
    }
    layers.extend(conv_layer("head", &[c, c, 3, 3], 1.0));
    layers
}

fn matcher_layout(cfg: &NetworkConfig) -> Vec<LayerInit> {
    let (c, m) = (cfg.feature_channels, cfg.matching_channels);
    let (relu_gain, n) = (2f64.sqrt(), cfg.norm_groups);
    let mut layers = Vec::new();
    layers.extend(normed_layer("fuse", &[m, 2 * c, 1, 1, 1], relu_gain, n));
    layers.extend(normed_layer("agg1", &[m, m, 3, 3, 3], relu_gain, n));
    layers.extend(normed_layer("agg2", &[m, m, 3, 3, 3], 0.5, n));
    layers.extend(conv_layer("score", &[1, m, 3, 3, 3], 1.0));
    layers
}

/// Fan-in scaled uniform weights, zero biases, unit norm scales.
fn init_set(layout: Vec<LayerInit>, rng: &mut ChaCha8Rng) -> ParamSet {
    let entries = layout
        .into_iter()
        .map(|l| {
            let n: usize = l.shape.iter().product();
            let data = match l.fill {
                Fill::Const(v) => vec![v; n],
                Fill::Uniform(gain) => {
                    let fan_in: usize = l.shape[1..].iter().product();
                    let bound = gain * (3.0 / fan_in as f64).sqrt();
                    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
                }
            };
            (l.name, Tensor::from_vec(&l.shape, data).expect("layout shape"))
        })
        .collect();
    ParamSet { entries }
}

impl NetworkParams {
    pub fn init(config: &NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        Ok(NetworkParams {
            config: config.clone(),
            extractor: init_set(extractor_layout(config), &mut rng),
            matcher: init_set(matcher_layout(config), &mut rng),
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.extractor.num_scalars() + self.matcher.num_scalars()
    }

    pub fn all_finite(&self) -> bool {
        self.extractor.tensors().chain(self.matcher.tensors()).all(Tensor::all_finite)
    }
}

/// Extractor on the tape. `params` comes from binding [`NetworkParams::extractor`].
/// Walks a bound parameter list in layout order.
struct Layers<'a> {
    params: &'a [Var],
    next: usize,
    groups: usize,
}

impl<'a> Layers<'a> {
    fn new(params: &'a [Var], groups: usize) -> Self {
        Layers { params, next: 0, groups }
    }

    fn take(&mut self) -> Var {
        self.next += 1;
        self.params[self.next - 1]
    }

    fn conv(&mut self, g: &mut Graph, x: Var, spec: ConvSpec) -> Var {
        let (w, b) = (self.take(), self.take());
        g.conv(x, w, Some(b), spec)
    }

    fn normed(&mut self, g: &mut Graph, x: Var, spec: ConvSpec) -> Var {
        let y = self.conv(g, x, spec);
        if self.groups == 0 {
            return y;
        }
        let (gamma, beta) = (self.take(), self.take());
        g.group_norm(y, gamma, beta, self.groups, NORM_EPS)
    }
}

const NORM_EPS: f64 = 1e-5;

pub fn extractor_graph(g: &mut Graph, cfg: &NetworkConfig, params: &[Var], img: Var) -> Var {
    let mut p = Layers::new(params, cfg.norm_groups);
    let x = g.add_scalar(img, -0.5);
    let s1 = if cfg.feature_stride >= 2 { 2 } else { 1 };
    let s2 = if cfg.feature_stride == 4 { 2 } else { 1 };
    let x = p.normed(g, x, ConvSpec::same2d(3, s1));
    let x = g.leaky_relu(x, LEAK);
    let x = p.normed(g, x, ConvSpec::same2d(3, s2));
    let mut x = g.leaky_relu(x, LEAK);
    for _ in 0..cfg.num_extractor_blocks {
        let y = p.normed(g, x, ConvSpec::same2d(3, 1));
        let y = g.leaky_relu(y, LEAK);
        let y = p.normed(g, y, ConvSpec::same2d(3, 1));
        let sum = g.add(x, y);
        x = g.leaky_relu(sum, LEAK);
    }
    p.conv(g, x, ConvSpec::same2d(3, 1))
}

/// Matching head: volume `[2C, D, h, w]` to per-hypothesis scores `[1, D, h, w]`.
pub fn matcher_graph(g: &mut Graph, cfg: &NetworkConfig, params: &[Var], volume: Var) -> Var {
    let mut p = Layers::new(params, cfg.norm_groups);
    let fuse = p.normed(g, volume, ConvSpec::same3d(1));
    let fuse = g.leaky_relu(fuse, LEAK);
    let a = p.normed(g, fuse, ConvSpec::same3d(3));
    let a = g.leaky_relu(a, LEAK);
    let a = p.normed(g, a, ConvSpec::same3d(3));
    let r = g.add(fuse, a);
    let r = g.leaky_relu(r, LEAK);
    p.conv(g, r, ConvSpec::same3d(3))
}

/// Scores to a full-resolution disparity: soft-argmin on the coarse grid, then bilinear upsampling.
pub fn regress_graph(g: &mut Graph, cfg: &NetworkConfig, scores: Var) -> Var {
    let coarse = g.soft_argmin(scores, cfg.feature_stride as f64);
    if cfg.feature_stride > 1 {
        g.upsample(coarse, cfg.feature_stride)
    } else {
        coarse
    }
}

pub struct GraphOutputs {
    pub disparity: Var,
    pub left_features: Var,
    pub right_features: Var,
}

pub fn forward_graph(
    g: &mut Graph,
    cfg: &NetworkConfig,
    extractor: &[Var],
    matcher: &[Var],
    left: Var,
    right: Var,
) -> GraphOutputs {
    let left_features = extractor_graph(g, cfg, extractor, left);
    let right_features = extractor_graph(g, cfg, extractor, right);
    let volume = g.cost_volume(left_features, right_features, cfg.cost_levels());
    let scores = matcher_graph(g, cfg, matcher, volume);
    let disparity = regress_graph(g, cfg, scores);
    GraphOutputs {
        disparity,
        left_features,
        right_features,
    }
}

fn check_input(img: &Image, cfg: &NetworkConfig) -> Result<()> {
    ensure_arg!(
        img.channels() == cfg.in_channels,
        "network expects {} channels, image has {}",
        cfg.in_channels,
        img.channels()
    );
    ensure_arg!(
        img.width() % cfg.feature_stride == 0 && img.height() % cfg.feature_stride == 0,
        "image {}x{} not divisible by feature stride {}",
        img.width(),
        img.height(),
        cfg.feature_stride
    );
    Ok(())
}

/// Runs the extractor with the given weights (which need not be the ones in `params.extractor`).
pub fn extract_features_with(img: &Image, cfg: &NetworkConfig, extractor: &ParamSet) -> Result<FeatureMap> {
    check_input(img, cfg)?;
    let mut g = Graph::new();
    let p = extractor.bind(&mut g, false);
    let x = g.constant(img.to_tensor());
    let f = extractor_graph(&mut g, cfg, &p, x);
    FeatureMap::new(g.value(f).clone(), cfg.feature_stride)
}

pub fn extract_features(img: &Image, params: &NetworkParams) -> Result<FeatureMap> {
    extract_features_with(img, &params.config, &params.extractor)
}

pub fn build_cost_volume(left: &FeatureMap, right: &FeatureMap, levels: usize) -> Result<CostVolume> {
    ensure_arg!(
        left.tensor().shape() == right.tensor().shape() && left.stride() == right.stride(),
        "cost volume: feature maps differ in shape"
    );
    ensure_arg!(levels > 0, "cost volume needs at least one level");
    let mut g = Graph::new();
    let l = g.constant(left.tensor().clone());
    let r = g.constant(right.tensor().clone());
    let v = g.cost_volume(l, r, levels);
    Ok(CostVolume {
        data: g.value(v).clone(),
        stride: left.stride(),
    })
}

/// `stride * sum_d d * softmax(-score)_d` per pixel for `[D, h, w]` scores.
pub fn soft_argmin(scores: &Tensor, stride: usize) -> Tensor {
    let mut g = Graph::new();
    let s = g.constant(scores.clone());
    let d = g.soft_argmin(s, stride as f64);
    g.value(d).clone()
}

pub fn regress_disparity(volume: &CostVolume, params: &NetworkParams) -> Result<DisparityMap> {
    let cfg = &params.config;
    ensure_arg!(
        volume.levels() == cfg.cost_levels() && volume.stride() == cfg.feature_stride,
        "cost volume does not match the network config"
    );
    ensure_arg!(
        volume.tensor().shape()[0] == 2 * cfg.feature_channels,
        "cost volume channel count does not match the network config"
    );
    let mut g = Graph::new();
    let m = params.matcher.bind(&mut g, false);
    let v = g.constant(volume.tensor().clone());
    let scores = matcher_graph(&mut g, cfg, &m, v);
    let d = regress_graph(&mut g, cfg, scores);
    DisparityMap::from_tensor(g.value(d))
}

pub struct Prediction {
    pub disparity: DisparityMap,
    pub left_features: FeatureMap,
    pub right_features: FeatureMap,
}

/// Full forward pass on a left view and the (upsampled) right view.
pub fn forward(left: &Image, right: &Image, params: &NetworkParams) -> Result<Prediction> {
    let cfg = &params.config;
    ensure_arg!(left.same_shape(right), "left and right views differ in shape");
    check_input(left, cfg)?;
    let mut g = Graph::new();
    let fp = params.extractor.bind(&mut g, false);
    let mp = params.matcher.bind(&mut g, false);
    let l = g.constant(left.to_tensor());
    let r = g.constant(right.to_tensor());
    let out = forward_graph(&mut g, cfg, &fp, &mp, l, r);
    Ok(Prediction {
        disparity: DisparityMap::from_tensor(g.value(out.disparity))?,
        left_features: FeatureMap::new(g.value(out.left_features).clone(), cfg.feature_stride)?,
        right_features: FeatureMap::new(g.value(out.right_features).clone(), cfg.feature_stride)?,
    })
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ASYMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: NetworkConfig,
    params: Vec<ParamHeader>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    group: String,
    name: String,
    shape: Vec<usize>,
}

/// Binary container: magic, version, JSON header (config + parameter names and
/// shapes), then every parameter as little-endian `f64` in header order.
pub fn encode_checkpoint(params: &NetworkParams) -> Vec<u8> {
    let groups = [("extractor", &params.extractor), ("matcher", &params.matcher)];
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: params.config.clone(),
        params: groups
            .iter()
            .flat_map(|(group, set)| {
                set.iter().map(move |(name, t)| ParamHeader {
                    group: group.to_string(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut out = Vec::with_capacity(json.len() + 8 * params.num_scalars() + 20);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, set) in groups {
        for t in set.tensors() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<NetworkParams> {
    let bad = |m: &str| Error::Format(format!("checkpoint: {m}"));
    if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("missing magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = 20usize.checked_add(hlen).filter(|e| *e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[20..body]).map_err(|e| bad(&e.to_string()))?;
    if header.version != version {
        return Err(bad("header version disagrees with preamble"));
    }
    header.config.validate()?;
    // shapes must match what the config implies
    let mut expected = NetworkParams::init(&header.config)?;
    let mut pos = body;
    let mut it = header.params.iter();
    for (group, set) in [("extractor", &mut expected.extractor), ("matcher", &mut expected.matcher)] {
        for (name, t) in set.entries.iter_mut() {
            let h = it.next().ok_or_else(|| bad("missing parameters"))?;
            if h.group != group || &h.name != name || h.shape != t.shape() {
                return Err(bad(&format!("unexpected parameter {}/{} {:?}", h.group, h.name, h.shape)));
            }
            let n = t.len();
            let end = pos + 8 * n;
            if end > bytes.len() {
                return Err(bad("truncated parameter data"));
            }
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                *v = f64::from_le_bytes(bytes[pos + 8 * i..pos + 8 * i + 8].try_into().expect("8 bytes"));
            }
            pos = end;
        }
    }
    if it.next().is_some() || pos != bytes.len() {
        return Err(bad("trailing data"));
    }
    Ok(expected)
}

pub fn save_checkpoint(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<NetworkParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::ColorSpace;

    #[test]
    fn covering_reaches_the_range() {
        for range in [1, 7, 32, 63] {
            let c = NetworkConfig::default().covering(range);
            assert!(c.validate().is_ok());
            let top = c.feature_stride * (c.cost_levels() - 1);
            assert!(top >= range && top < range + c.feature_stride, "{range} -> {top}");
        }
    }

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            feature_channels: 4,
            num_extractor_blocks: 1,
            matching_channels: 4,
            d_max: 16,
            ..NetworkConfig::default()
        }
    }

    fn normed_config() -> NetworkConfig {
        NetworkConfig { norm_groups: 2, ..small_config() }
    }

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, ColorSpace::Rgb, |_, _, _| rng.random())
    }

    #[test]
    fn feature_shape_contract() {
        let params = NetworkParams::init(&NetworkConfig::default()).unwrap();
        let f = extract_features(&random_image(64, 64, 1), &params).unwrap();
        assert_eq!(f.tensor().shape(), &[16, 16, 16]);
        assert_eq!(f.stride(), 4);
        let e = extract_features(&random_image(66, 64, 1), &params);
        assert!(matches!(e, Err(Error::Argument(_))));
    }

    #[test]
    fn identical_images_give_identical_features() {
        let params = NetworkParams::init(&small_config()).unwrap();
        let img = random_image(32, 16, 2);
        let a = extract_features(&img, &params).unwrap();
        let b = extract_features(&img.clone(), &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        let mut c = small_config();
        c.feature_stride = 3;
        assert!(c.validate().is_err());
        c.feature_stride = 4;
        c.d_max = 18;
        assert!(c.validate().is_err());
        let mut kv = KeyValues::new();
        kv.set("d_max", 32);
        let mut c = small_config();
        c.apply(&kv).unwrap();
        assert_eq!(c.cost_levels(), 8);
        c.norm_groups = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn norm_layers_follow_the_config() {
        let (plain, normed) = (NetworkParams::init(&small_config()).unwrap(), NetworkParams::init(&normed_config()).unwrap());
        // 4 normalized convolutions in the extractor and 3 in the matcher, each with gamma and beta
        assert_eq!(normed.extractor.len(), plain.extractor.len() + 8);
        assert_eq!(normed.matcher.len(), plain.matcher.len() + 6);
        let gamma = normed.extractor.get("stem1.norm.gamma").unwrap();
        assert!(gamma.data().iter().all(|v| *v == 1.0));
        assert!(normed.extractor.get("stem1.norm.beta").unwrap().data().iter().all(|v| *v == 0.0));
        assert!(plain.extractor.get("stem1.norm.gamma").is_none());
    }

    #[test]
    fn cost_volume_slices_follow_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mk = |rng: &mut ChaCha8Rng| {
            FeatureMap::new(Tensor::from_vec(&[3, 4, 9], (0..108).map(|_| rng.random()).collect()).unwrap(), 4).unwrap()
        };
        let (l, r) = (mk(&mut rng), mk(&mut rng));
        let cv = build_cost_volume(&l, &r, 5).unwrap();
        assert_eq!(cv.tensor().shape(), &[6, 5, 4, 9]);
        let at = |c: usize, d: usize, y: usize, x: usize| cv.tensor().data()[((c * 5 + d) * 4 + y) * 9 + x];
        for d in 0..5 {
            for y in 0..4 {
                for x in 0..9 {
                    for c in 0..3 {
                        assert_eq!(at(c, d, y, x), l.get(c, y, x));
                        let src = if x >= d { x - d } else { 0 };
                        assert_eq!(at(3 + c, d, y, x), r.get(c, y, src));
                    }
                }
            }
        }
        let bad = FeatureMap::new(Tensor::zeros(&[3, 4, 8]), 4).unwrap();
        assert!(build_cost_volume(&l, &bad, 5).is_err());
    }

    #[test]
    fn soft_argmin_limits() {
        let (d, h, w) = (8, 2, 3);
        let mut s = Tensor::full(&[d, h, w], 1e3);
        for i in 0..h * w {
            s.data_mut()[5 * h * w + i] = -1e3;
        }
        let out = soft_argmin(&s, 4);
        assert!(out.data().iter().all(|v| (v - 20.0).abs() < 1e-3));
        let uniform = soft_argmin(&Tensor::full(&[d, h, w], 0.3), 4);
        assert!(uniform.data().iter().all(|v| (v - 4.0 * 3.5).abs() < 1e-12));
    }

    #[test]
    fn soft_argmin_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (d, n) = (6, 10);
        let s = Tensor::from_vec(&[d, 1, n], (0..d * n).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let out = soft_argmin(&s, 2);
        for i in 0..n {
            let e: Vec<f64> = (0..d).map(|k| (-s.data()[k * n + i]).exp()).collect();
            let z: f64 = e.iter().sum();
            let expect = 2.0 * e.iter().enumerate().map(|(k, v)| k as f64 * v / z).sum::<f64>();
            assert!((out.data()[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_shapes_range_and_determinism() {
        for cfg in [small_config(), normed_config()] {
            check_forward(&cfg);
        }
    }

    fn check_forward(cfg: &NetworkConfig) {
        let params = NetworkParams::init(cfg).unwrap();
        let (l, r) = (random_image(32, 16, 4), random_image(32, 16, 5));
        let a = forward(&l, &r, &params).unwrap();
        assert_eq!((a.disparity.width(), a.disparity.height()), (32, 16));
        assert!(a.disparity.data().iter().all(|v| *v >= 0.0 && *v <= cfg.d_max as f32));
        let b = forward(&l, &r, &params).unwrap();
        assert_eq!(a.disparity, b.disparity);
        assert_eq!(a.left_features, extract_features(&l, &params).unwrap());
        let cv = build_cost_volume(&a.left_features, &a.right_features, cfg.cost_levels()).unwrap();
        assert_eq!(regress_disparity(&cv, &params).unwrap(), a.disparity);
    }

    #[test]
    fn extractor_weight_gradient_matches_finite_differences() {
        for cfg in [small_config(), normed_config()] {
            check_extractor_gradient(cfg);
        }
    }

    fn check_extractor_gradient(cfg: NetworkConfig) {
        let params = NetworkParams::init(&cfg).unwrap();
        let img = random_image(16, 16, 6);
        let eval = |p: &ParamSet| {
            let mut g = Graph::new();
            let v = p.bind(&mut g, true);
            let x = g.constant(img.to_tensor());
            let f = extractor_graph(&mut g, &cfg, &v, x);
            let s = g.sum(f);
            g.backward(s);
            (g.value(s).item(), v.iter().map(|v| g.grad(*v).cloned()).collect::<Vec<_>>())
        };
        let (_, grads) = eval(&params.extractor);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..12 {
            let ti = rng.random_range(0..params.extractor.len());
            let ei = rng.random_range(0..params.extractor.entries[ti].1.len());
            let h = 1e-6;
            let bump = |delta: f64| {
                let mut p = params.extractor.clone();
                p.entries[ti].1.data_mut()[ei] += delta;
                eval(&p).0
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            let a = grads[ti].as_ref().unwrap().data()[ei];
            assert!((a - fd).abs() / fd.abs().max(1e-3) < 1e-3, "{}[{ei}]: {a} vs {fd}", params.extractor.entries[ti].0);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let (l, r) = (random_image(32, 16, 7), random_image(32, 16, 8));
        for cfg in [normed_config(), small_config()] {
            let params = NetworkParams::init(&cfg).unwrap();
            let back = decode_checkpoint(&encode_checkpoint(&params)).unwrap();
            assert_eq!(back, params);
            assert_eq!(forward(&l, &r, &back).unwrap().disparity, forward(&l, &r, &params).unwrap().disparity);
        }
        let bytes = encode_checkpoint(&NetworkParams::init(&small_config()).unwrap());

        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(decode_checkpoint(&wrong), Err(Error::Format(_))));
    }
}
