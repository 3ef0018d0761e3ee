//! The 20-convolution dilated residual network that maps a normalized CT
//! slice to a per-pixel lung probability.
//!
//! Layout (pre-activation residual blocks, norm → ReLU → conv):
//!
//! ```text
//! stem     3x3 conv 1→16, d=1
//! stage 1  3 blocks, 16 ch, d=1
//! stage 2  3 blocks, 32 ch, d=2   (first block: 1x1 projection on the skip)
//! stage 3  3 blocks, 64 ch, d=4   (first block: 1x1 projection on the skip)
//! head     norm → ReLU → 1x1 conv 64→2 → softmax over the 2 classes
//! ```
//!
//! Each block holds two 3x3 convolutions bridged by one residual connection,
//! giving 1 + 18 + 1 = 20 convolutions. Skip projections are not counted.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{
    conv2d_backward, conv2d_forward, instance_norm_backward, instance_norm_forward, relu_backward,
    relu_forward, residual_add_backward, residual_add_forward, softmax2_backward,
    softmax2_forward, ConvSpec, NormCache, Tensor4,
};
use crate::preprocess::{NormalizedSlice, Slice2d};
use crate::volume::{BinaryMask, ProbMap};

/// One dilation stage of residual blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stage {
    pub dilation: usize,
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchitectureSpec {
    pub in_channels: usize,
    pub stem_channels: usize,
    pub stages: Vec<Stage>,
    pub classes: usize,
}

impl Default for ArchitectureSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stem_channels: 16,
            stages: vec![
                Stage { dilation: 1, channels: 16, blocks: 3 },
                Stage { dilation: 2, channels: 32, blocks: 3 },
                Stage { dilation: 4, channels: 64, blocks: 3 },
            ],
            classes: 2,
        }
    }
}

impl ArchitectureSpec {
    /// Stable identifier written into weight files.
    pub fn fingerprint(&self) -> String {
        let mut s = format!("dilated-resnet/in{}/stem{}", self.in_channels, self.stem_channels);
        for st in &self.stages {
            let _ = write!(s, "/d{}c{}b{}", st.dilation, st.channels, st.blocks);
        }
        let _ = write!(s, "/cls{}/preact-instnorm", self.classes);
        s
    }

    /// Residual blocks in execution order.
    pub fn blocks(&self) -> Vec<BlockSpec> {
        let mut out = Vec::new();
        let mut c_in = self.stem_channels;
        for (si, st) in self.stages.iter().enumerate() {
            for bi in 0..st.blocks {
                out.push(BlockSpec {
                    stage: si,
                    index: bi,
                    conv1: ConvSpec::new(c_in, st.channels, 3, st.dilation),
                    conv2: ConvSpec::new(st.channels, st.channels, 3, st.dilation),
                    projection: (c_in != st.channels).then(|| ConvSpec::new(c_in, st.channels, 1, 1)),
                });
                c_in = st.channels;
            }
        }
        out
    }

    pub fn stem(&self) -> ConvSpec {
        ConvSpec::new(self.in_channels, self.stem_channels, 3, 1)
    }

    pub fn head(&self) -> ConvSpec {
        let c = self.stages.last().map_or(self.stem_channels, |s| s.channels);
        ConvSpec::new(c, self.classes, 1, 1)
    }

    /// All main-path convolutions in execution order (stem, block convs, head).
    pub fn convolutions(&self) -> Vec<ConvSpec> {
        let mut v = vec![self.stem()];
        for b in self.blocks() {
            v.push(b.conv1);
            v.push(b.conv2);
        }
        v.push(self.head());
        v
    }
}

/// Two convolutions bridged by one residual connection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub stage: usize,
    pub index: usize,
    pub conv1: ConvSpec,
    pub conv2: ConvSpec,
    /// 1x1 projection on the skip path when the channel count changes.
    pub projection: Option<ConvSpec>,
}

impl BlockSpec {
    /// Main-path convolutions spanned by the skip connection.
    pub fn skip_span(&self) -> [ConvSpec; 2] {
        [self.conv1, self.conv2]
    }
}

/// A named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He { fan_in: usize },
    Zeros,
    Ones,
}

/// Model weights: ordered named tensors over one flat `f32` buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    fingerprint: String,
    entries: Vec<ParamEntry>,
    values: Vec<f32>,
}

impl ModelParams {
    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &self.values[e.range()])
    }

    fn at(&self, idx: usize) -> &[f32] {
        &self.values[self.entries[idx].range()]
    }

    pub fn ensure_compatible(&self, other: &ModelParams) -> Result<()> {
        if self.fingerprint != other.fingerprint {
            return Err(Error::Fingerprint {
                expected: self.fingerprint.clone(),
                found: other.fingerprint.clone(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layout {
    entries: Vec<(ParamEntry, Init)>,
    total: usize,
}

impl Layout {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let entry = ParamEntry {
            name,
            offset: self.total,
            shape,
        };
        self.total += entry.len();
        self.entries.push((entry, init));
        self.entries.len() - 1
    }

    fn conv(&mut self, prefix: &str, spec: &ConvSpec, bias: bool) -> ConvSlot {
        let weight = self.push(
            format!("{prefix}.weight"),
            spec.weight_shape().to_vec(),
            Init::He { fan_in: spec.patch_len() },
        );
        let bias = bias.then(|| self.push(format!("{prefix}.bias"), vec![spec.out_channels], Init::Zeros));
        ConvSlot { spec: *spec, weight, bias }
    }

    fn norm(&mut self, prefix: &str, channels: usize) -> NormSlot {
        NormSlot {
            scale: self.push(format!("{prefix}.scale"), vec![channels], Init::Ones),
            shift: self.push(format!("{prefix}.shift"), vec![channels], Init::Zeros),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    spec: ConvSpec,
    weight: usize,
    bias: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct NormSlot {
    scale: usize,
    shift: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    norm1: NormSlot,
    conv1: ConvSlot,
    norm2: NormSlot,
    conv2: ConvSlot,
    projection: Option<ConvSlot>,
}

/// Executable network bound to an architecture.
#[derive(Debug, Clone)]
pub struct Network {
    arch: ArchitectureSpec,
    layout: Layout,
    stem: ConvSlot,
    blocks: Vec<BlockSlots>,
    head_norm: NormSlot,
    head: ConvSlot,
}

struct BlockCache {
    input: Tensor4<f32>,
    norm1: NormCache<f32>,
    act1: Tensor4<f32>,
    norm2: NormCache<f32>,
    act2: Tensor4<f32>,
}

/// Activations saved by a training forward pass.
pub struct ForwardCache {
    input: Tensor4<f32>,
    blocks: Vec<BlockCache>,
    head_norm: NormCache<f32>,
    head_act: Tensor4<f32>,
    probs: Tensor4<f32>,
}

impl ForwardCache {
    /// Softmax output `(batch, 2, rows, cols)`.
    pub fn probs(&self) -> &Tensor4<f32> {
        &self.probs
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a += b);
}

impl Network {
    pub fn new(arch: ArchitectureSpec) -> Self {
        let mut layout = Layout {
            entries: Vec::new(),
            total: 0,
        };
        let stem = layout.conv("stem", &arch.stem(), true);
        let blocks = arch
            .blocks()
            .iter()
            .map(|b| {
                let p = format!("stage{}.block{}", b.stage + 1, b.index);
                BlockSlots {
                    norm1: layout.norm(&format!("{p}.norm1"), b.conv1.in_channels),
                    conv1: layout.conv(&format!("{p}.conv1"), &b.conv1, true),
                    norm2: layout.norm(&format!("{p}.norm2"), b.conv2.in_channels),
                    conv2: layout.conv(&format!("{p}.conv2"), &b.conv2, true),
                    projection: b.projection.map(|s| layout.conv(&format!("{p}.proj"), &s, false)),
                }
            })
            .collect();
        let head_spec = arch.head();
        let head_norm = layout.norm("head.norm", head_spec.in_channels);
        let head = layout.conv("head.conv", &head_spec, true);
        Self {
            arch,
            layout,
            stem,
            blocks,
            head_norm,
            head,
        }
    }

    pub fn arch(&self) -> &ArchitectureSpec {
        &self.arch
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// He-normal (fan-in) conv weights, zero biases and shifts, unit scales.
    /// Entries are drawn in layout order from a ChaCha8 stream seeded by `seed`.
    pub fn init_params(&self, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = Vec::with_capacity(self.layout.total);
        for (entry, init) in &self.layout.entries {
            match *init {
                Init::He { fan_in } => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                        .expect("positive std");
                    values.extend((0..entry.len()).map(|_| normal.sample(&mut rng) as f32));
                }
                Init::Zeros => values.extend(std::iter::repeat_n(0.0f32, entry.len())),
                Init::Ones => values.extend(std::iter::repeat_n(1.0f32, entry.len())),
            }
        }
        ModelParams {
            fingerprint: self.arch.fingerprint(),
            entries: self.layout.entries.iter().map(|(e, _)| e.clone()).collect(),
            values,
        }
    }

    fn check(&self, params: &ModelParams, x: &Tensor4<f32>) -> Result<()> {
        if params.fingerprint != self.arch.fingerprint() {
            return Err(Error::Fingerprint {
                expected: self.arch.fingerprint(),
                found: params.fingerprint.clone(),
            });
        }
        if params.values.len() != self.layout.total {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters, architecture needs {}",
                params.values.len(),
                self.layout.total
            )));
        }
        if x.channels() != self.arch.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "network input has {} channels, expected {}",
                x.channels(),
                self.arch.in_channels
            )));
        }
        Ok(())
    }

    fn conv(&self, p: &ModelParams, slot: &ConvSlot, x: &Tensor4<f32>) -> Result<Tensor4<f32>> {
        conv2d_forward(x, p.at(slot.weight), slot.bias.map(|b| p.at(b)), &slot.spec)
    }

    fn norm(&self, p: &ModelParams, slot: &NormSlot, x: &Tensor4<f32>) -> Result<(Tensor4<f32>, NormCache<f32>)> {
        instance_norm_forward(x, p.at(slot.scale), p.at(slot.shift))
    }

    /// Class probabilities for a `(batch, 1, rows, cols)` input. With
    /// `keep_cache` the activations needed by [`Network::backward`] are kept.
    pub fn forward(
        &self,
        params: &ModelParams,
        x: &Tensor4<f32>,
        keep_cache: bool,
    ) -> Result<(Tensor4<f32>, Option<ForwardCache>)> {
        self.check(params, x)?;
        let mut h = self.conv(params, &self.stem, x)?;
        let mut caches = Vec::new();
        for slot in &self.blocks {
            let (a1, norm1) = self.norm(params, &slot.norm1, &h)?;
            let act1 = relu_forward(&a1);
            drop(a1);
            let c1 = self.conv(params, &slot.conv1, &act1)?;
            let (a2, norm2) = self.norm(params, &slot.norm2, &c1)?;
            drop(c1);
            let act2 = relu_forward(&a2);
            drop(a2);
            let c2 = self.conv(params, &slot.conv2, &act2)?;
            let out = match &slot.projection {
                Some(proj) => residual_add_forward(&c2, &self.conv(params, proj, &h)?)?,
                None => residual_add_forward(&c2, &h)?,
            };
            let input = std::mem::replace(&mut h, out);
            if keep_cache {
                caches.push(BlockCache {
                    input,
                    norm1,
                    act1,
                    norm2,
                    act2,
                });
            }
        }
        let (a, head_norm) = self.norm(params, &self.head_norm, &h)?;
        let head_act = relu_forward(&a);
        let logits = self.conv(params, &self.head, &head_act)?;
        let probs = softmax2_forward(&logits)?;
        let cache = keep_cache.then(|| ForwardCache {
            input: x.clone(),
            blocks: caches,
            head_norm,
            head_act,
            probs: probs.clone(),
        });
        Ok((probs, cache))
    }

    /// Gradient of a scalar loss with respect to every parameter, given the
    /// loss gradient on the softmax output. Returned in the flat layout of
    /// [`ModelParams::values`].
    pub fn backward(
        &self,
        params: &ModelParams,
        cache: &ForwardCache,
        grad_probs: &Tensor4<f32>,
    ) -> Result<Vec<f32>> {
        let mut grads = vec![0.0f32; self.layout.total];
        let entry = |i: usize| self.layout.entries[i].0.range();

        let g_logits = softmax2_backward(&cache.probs, grad_probs)?;
        let hg = conv2d_backward(&cache.head_act, params.at(self.head.weight), &g_logits, &self.head.spec)?;
        add_into(&mut grads[entry(self.head.weight)], &hg.weight);
        if let Some(b) = self.head.bias {
            add_into(&mut grads[entry(b)], &hg.bias);
        }
        let g_a = relu_backward(&cache.head_act, &hg.input)?;
        let ng = instance_norm_backward(&cache.head_norm, params.at(self.head_norm.scale), &g_a)?;
        add_into(&mut grads[entry(self.head_norm.scale)], &ng.scale);
        add_into(&mut grads[entry(self.head_norm.shift)], &ng.shift);
        let mut g_h = ng.input;

        for (slot, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let (g_main, g_skip) = residual_add_backward(&g_h);
            let c2 = conv2d_backward(&bc.act2, params.at(slot.conv2.weight), &g_main, &slot.conv2.spec)?;
            add_into(&mut grads[entry(slot.conv2.weight)], &c2.weight);
            if let Some(b) = slot.conv2.bias {
                add_into(&mut grads[entry(b)], &c2.bias);
            }
            let g = relu_backward(&bc.act2, &c2.input)?;
            let n2 = instance_norm_backward(&bc.norm2, params.at(slot.norm2.scale), &g)?;
            add_into(&mut grads[entry(slot.norm2.scale)], &n2.scale);
            add_into(&mut grads[entry(slot.norm2.shift)], &n2.shift);
            let c1 = conv2d_backward(&bc.act1, params.at(slot.conv1.weight), &n2.input, &slot.conv1.spec)?;
            add_into(&mut grads[entry(slot.conv1.weight)], &c1.weight);
            if let Some(b) = slot.conv1.bias {
                add_into(&mut grads[entry(b)], &c1.bias);
            }
            let g = relu_backward(&bc.act1, &c1.input)?;
            let n1 = instance_norm_backward(&bc.norm1, params.at(slot.norm1.scale), &g)?;
            add_into(&mut grads[entry(slot.norm1.scale)], &n1.scale);
            add_into(&mut grads[entry(slot.norm1.shift)], &n1.shift);
            let mut g_in = n1.input;
            match &slot.projection {
                Some(proj) => {
                    let pg = conv2d_backward(&bc.input, params.at(proj.weight), &g_skip, &proj.spec)?;
                    add_into(&mut grads[entry(proj.weight)], &pg.weight);
                    add_into(g_in.data_mut(), pg.input.data());
                }
                None => add_into(g_in.data_mut(), g_skip.data()),
            }
            g_h = g_in;
        }

        let sg = conv2d_backward(&cache.input, params.at(self.stem.weight), &g_h, &self.stem.spec)?;
        add_into(&mut grads[entry(self.stem.weight)], &sg.weight);
        if let Some(b) = self.stem.bias {
            add_into(&mut grads[entry(b)], &sg.bias);
        }
        Ok(grads)
    }

    /// Lung (class 1) probability for each slice. All slices must share one size.
    pub fn predict(&self, params: &ModelParams, slices: &[&Slice2d]) -> Result<Vec<Slice2d>> {
        let Some(first) = slices.first() else {
            return Ok(Vec::new());
        };
        let (rows, cols) = (first.rows(), first.cols());
        let mut data = Vec::with_capacity(slices.len() * rows * cols);
        for s in slices {
            if (s.rows(), s.cols()) != (rows, cols) {
                return Err(Error::ShapeMismatch(format!(
                    "mixed slice sizes {}x{} and {}x{} in one batch",
                    rows,
                    cols,
                    s.rows(),
                    s.cols()
                )));
            }
            data.extend_from_slice(s.data());
        }
        let x = Tensor4::from_vec([slices.len(), 1, rows, cols], data)?;
        let (probs, _) = self.forward(params, &x, false)?;
        let plane = rows * cols;
        probs
            .data()
            .chunks_exact(2 * plane)
            .map(|s| Slice2d::new(rows, cols, s[plane..].to_vec()))
            .collect()
    }

    /// Lung probability of one network-window slice.
    pub fn forward_lung_prob(&self, params: &ModelParams, slice: &NormalizedSlice) -> Result<Slice2d> {
        Ok(self.predict(params, &[&slice.image])?.remove(0))
    }
}

/// Voxelwise `p >= tau`.
pub fn lung_mask_from_prob(p: &ProbMap, tau: f64) -> Result<BinaryMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("lung threshold {tau} outside (0, 1)")));
    }
    p.map(|v| f64::from(v) >= tau)
}

fn blob_name(path: &Path) -> Result<String> {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(|n| format!("{n}.bin"))
        .ok_or_else(|| Error::InvalidArgument(format!("bad weight path {}", path.display())))
}

/// Writes a text manifest at `path` and the raw little-endian `f32` blob
/// next to it as `<name>.bin`.
///
/// ```text
/// fingerprint dilated-resnet/in1/stem16/...
/// data dlnorm.w.bin
/// stem.weight 16x1x3x3 0
/// stem.bias 16 144
/// ```
pub fn save_params(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let blob = blob_name(path)?;
    let mut manifest = format!("fingerprint {}\ndata {blob}\n", params.fingerprint);
    for e in &params.entries {
        let shape: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(manifest, "{} {} {}", e.name, shape.join("x"), e.offset);
    }
    let bytes: Vec<u8> = params.values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let blob_path = path.with_file_name(&blob);
    fs::write(&blob_path, bytes).map_err(|e| Error::io(&blob_path, e))?;
    fs::write(path, manifest).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads weights written by [`save_params`] and checks them against `network`.
pub fn load_params(path: impl AsRef<Path>, network: &Network) -> Result<ModelParams> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let bad = |msg: String| Error::format(path, msg);
    let fingerprint = lines
        .next()
        .and_then(|l| l.strip_prefix("fingerprint "))
        .ok_or_else(|| bad("missing fingerprint line".into()))?
        .to_string();
    let expected = network.arch.fingerprint();
    if fingerprint != expected {
        return Err(Error::Fingerprint {
            expected,
            found: fingerprint,
        });
    }
    let blob = lines
        .next()
        .and_then(|l| l.strip_prefix("data "))
        .ok_or_else(|| bad("missing data line".into()))?;
    let mut entries = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let (Some(name), Some(shape), Some(offset), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(bad(format!("malformed tensor line `{line}`")));
        };
        let shape = shape
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| bad(format!("bad shape in `{line}`")))?;
        let offset = offset
            .parse::<usize>()
            .map_err(|_| bad(format!("bad offset in `{line}`")))?;
        entries.push(ParamEntry {
            name: name.to_string(),
            shape,
            offset,
        });
    }
    let layout: Vec<&ParamEntry> = network.layout.entries.iter().map(|(e, _)| e).collect();
    if entries.len() != layout.len() || entries.iter().zip(&layout).any(|(a, b)| a != *b) {
        return Err(Error::ShapeMismatch(format!(
            "{}: tensor table does not match architecture `{expected}`",
            path.display()
        )));
    }
    let blob_path = path.with_file_name(blob);
    let bytes = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    if bytes.len() != network.layout.total * 4 {
        return Err(Error::format(
            &blob_path,
            format!(
                "weight blob has {} bytes, expected {}",
                bytes.len(),
                network.layout.total * 4
            ),
        ));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(ModelParams {
        fingerprint: expected,
        entries,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_arch() -> ArchitectureSpec {
        ArchitectureSpec {
            in_channels: 1,
            stem_channels: 4,
            stages: vec![
                Stage { dilation: 1, channels: 4, blocks: 1 },
                Stage { dilation: 2, channels: 6, blocks: 1 },
            ],
            classes: 2,
        }
    }

    #[test]
    fn default_architecture_has_twenty_convolutions() {
        let arch = ArchitectureSpec::default();
        let convs = arch.convolutions();
        assert_eq!(convs.len(), 20);
        let blocks = arch.blocks();
        assert_eq!(blocks.len(), 9);
        let schedule: Vec<(usize, usize)> = blocks.iter().map(|b| (b.conv2.dilation, b.conv2.out_channels)).collect();
        assert_eq!(
            schedule,
            [(1, 16), (1, 16), (1, 16), (2, 32), (2, 32), (2, 32), (4, 64), (4, 64), (4, 64)]
        );
        let projections: Vec<bool> = blocks.iter().map(|b| b.projection.is_some()).collect();
        assert_eq!(projections, [false, false, false, true, false, false, true, false, false]);
        assert_eq!(arch.head().kernel, (1, 1));
        assert_eq!(arch.head().out_channels, 2);
    }

    #[test]
    fn init_is_seed_deterministic() {
        let net = Network::new(tiny_arch());
        assert_eq!(net.init_params(3), net.init_params(3));
        assert_ne!(net.init_params(3).values(), net.init_params(4).values());
    }

    #[test]
    fn he_std_on_large_layers() {
        let net = Network::new(ArchitectureSpec::default());
        let p = net.init_params(11);
        let mut checked = 0;
        for e in p.entries().iter().filter(|e| e.name.ends_with(".weight") && e.len() >= 10_000) {
            let w = p.get(&e.name).unwrap();
            let fan_in: usize = e.shape[1..].iter().product();
            let target = (2.0 / fan_in as f64).sqrt();
            let n = w.len() as f64;
            let mean = w.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
            let sd = (w.iter().map(|&v| (f64::from(v) - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!(sd < 3.0 * target && sd > target / 3.0, "{}: {sd} vs {target}", e.name);
            checked += 1;
        }
        assert!(checked >= 6);
    }

    #[test]
    fn forward_is_probability_field() {
        let net = Network::new(tiny_arch());
        let p = net.init_params(1);
        let data: Vec<f32> = (0..2 * 7 * 5).map(|i| ((i * 37) % 11) as f32 / 11.0).collect();
        let x = Tensor4::from_vec([2, 1, 7, 5], data).unwrap();
        let (probs, _) = net.forward(&p, &x, false).unwrap();
        assert_eq!(probs.shape(), [2, 2, 7, 5]);
        for s in probs.data().chunks(70) {
            for i in 0..35 {
                assert!((s[i] + s[35 + i] - 1.0).abs() < 1e-6);
                assert!((0.0..=1.0).contains(&s[35 + i]));
            }
        }
        // Identical samples in a batch give identical outputs.
        let same = Tensor4::from_vec([2, 1, 7, 5], [x.sample(0), x.sample(0)].concat()).unwrap();
        let (q, _) = net.forward(&p, &same, false).unwrap();
        assert_eq!(q.sample(0), q.sample(1));
    }

    #[test]
    fn wrong_window_channels_rejected() {
        let net = Network::new(tiny_arch());
        let p = net.init_params(1);
        let x = Tensor4::zeros([1, 2, 4, 4]);
        assert!(matches!(net.forward(&p, &x, false), Err(Error::ShapeMismatch(_))));
        let other = Network::new(ArchitectureSpec::default()).init_params(0);
        let x = Tensor4::zeros([1, 1, 4, 4]);
        assert!(matches!(net.forward(&other, &x, false), Err(Error::Fingerprint { .. })));
    }

    #[test]
    fn lung_threshold_rules() {
        let g = crate::volume::Geometry::with_dims([2, 2, 1]).unwrap();
        let p = ProbMap::filled(g, 0.9).unwrap();
        assert_eq!(lung_mask_from_prob(&p, 0.5).unwrap().count(), 4);
        let half = ProbMap::filled(g, 0.5).unwrap();
        assert_eq!(lung_mask_from_prob(&half, 0.5).unwrap().count(), 4);
        let ramp = ProbMap::new(g, vec![0.1, 0.4, 0.6, 0.8]).unwrap();
        let hi = lung_mask_from_prob(&ramp, 0.7).unwrap();
        let lo = lung_mask_from_prob(&ramp, 0.3).unwrap();
        assert!(hi.is_subset_of(&lo).unwrap());
        assert!(lung_mask_from_prob(&ramp, 1.0).is_err());
    }

    #[test]
    fn weight_file_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let net = Network::new(tiny_arch());
        let p = net.init_params(5);
        let path = dir.path().join("m.w");
        save_params(&p, &path).unwrap();
        let back = load_params(&path, &net).unwrap();
        assert_eq!(back, p);
        assert!(back.values().iter().zip(p.values()).all(|(a, b)| a.to_bits() == b.to_bits()));

        // Foreign architecture.
        let other = Network::new(ArchitectureSpec::default());
        assert!(matches!(load_params(&path, &other), Err(Error::Fingerprint { .. })));

        // Truncated blob.
        let blob = dir.path().join("m.w.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(load_params(&path, &net), Err(Error::Format { .. })));

        // Corrupt manifest.
        fs::write(&path, "garbage\n").unwrap();
        assert!(matches!(load_params(&path, &net), Err(Error::Format { .. })));
    }
}
