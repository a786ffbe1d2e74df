//! Concrete architectures split into encryption `g`, processing `Φ` and
//! decryption `d` stacks.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{ParamStore, Tape, Value, Var};
use crate::error::{Error, Result};
use crate::layers::{
    certify_equivariance, default_tolerance, Ctx, DeltaMode, LayerSpec, Mode, Sequential,
};
use crate::rng::Rng;
use crate::secure::noisy_feature;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResNetSplit {
    /// `d` holds every residual block after the first 8×8 block.
    Alpha,
    /// `d` holds only the last residual block.
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    LeNet,
    ResNet { depth: usize, split: ResNetSplit },
}

impl Arch {
    fn blocks_per_stage(depth: usize) -> Result<usize> {
        if depth < 14 || (depth - 2) % 6 != 0 {
            return Err(Error::Unsupported(format!("resnet depth must be 6n+2 with n >= 2, got {depth}")));
        }
        Ok((depth - 2) / 6)
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "lenet" {
            return Ok(Arch::LeNet);
        }
        let unsupported = || Error::Unsupported(format!("unknown architecture `{s}`"));
        let rest = lower.strip_prefix("resnet").ok_or_else(unsupported)?;
        let (depth, split) = rest.split_once('-').ok_or_else(unsupported)?;
        let depth: usize = depth.parse().map_err(|_| unsupported())?;
        let split = match split {
            "alpha" => ResNetSplit::Alpha,
            "beta" => ResNetSplit::Beta,
            _ => return Err(unsupported()),
        };
        Arch::blocks_per_stage(depth)?;
        Ok(Arch::ResNet { depth, split })
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::LeNet => write!(f, "lenet"),
            Arch::ResNet { depth, split: ResNetSplit::Alpha } => write!(f, "resnet{depth}-alpha"),
            Arch::ResNet { depth, split: ResNetSplit::Beta } => write!(f, "resnet{depth}-beta"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    /// Complex pipeline with generator head; trained adversarially.
    Complex,
    /// Unmodified real network.
    Original,
    /// Real network plus a generator-shaped layer, no adversarial loss.
    AdditionalLayers,
    /// Real network releasing `a + γ·ε` after `g`.
    Noisy { gamma: f64 },
}

impl Variant {
    pub fn is_complex(self) -> bool {
        matches!(self, Variant::Complex)
    }

    pub fn tag(self) -> String {
        match self {
            Variant::Complex => "complex".into(),
            Variant::Original => "original".into(),
            Variant::AdditionalLayers => "additional_layers".into(),
            Variant::Noisy { gamma } => format!("noisy:{gamma}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "complex" => Ok(Variant::Complex),
            "original" => Ok(Variant::Original),
            "additional_layers" | "additional-layers" => Ok(Variant::AdditionalLayers),
            _ => {
                if let Some(g) = s.strip_prefix("noisy:").or_else(|| s.strip_prefix("noisy=")) {
                    let gamma: f64 = g.parse().map_err(|_| Error::Unsupported(format!("bad noise level in `{s}`")))?;
                    if !(gamma >= 0.0) {
                        return Err(Error::InvalidArgument(format!("noise level must be >= 0, got {gamma}")));
                    }
                    Ok(Variant::Noisy { gamma })
                } else {
                    Err(Error::Unsupported(format!("unknown variant `{s}`")))
                }
            }
        }
    }
}

/// A network divided into `g → Φ → d`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkDivision {
    pub arch: Arch,
    pub variant: Variant,
    pub g: Sequential,
    pub phi: Sequential,
    pub d: Sequential,
    pub classes: usize,
    /// (C, H, W) of one input image.
    pub input_shape: [usize; 3],
    /// Shape of one released feature `a` (without batch axis).
    pub feature_shape: Vec<usize>,
}

impl NetworkDivision {
    /// Validates a division: every `Φ` layer must be of a certified kind and
    /// the three stacks must chain from the input shape to `(N, classes)`.
    pub fn new(
        arch: Arch,
        variant: Variant,
        g: Sequential,
        phi: Sequential,
        d: Sequential,
        classes: usize,
        input_shape: [usize; 3],
    ) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
        }
        if let Some((i, kind)) = phi.first_uncertified() {
            return Err(Error::Uncertified(format!(
                "layer {i} of the processing stack is `{}`, which does not commute with phase rotation",
                kind.name()
            )));
        }
        let x = [1, input_shape[0], input_shape[1], input_shape[2]];
        let a = g.out_shape(&x)?;
        let h = phi.out_shape(&a)?;
        let y = d.out_shape(&h)?;
        let flat: usize = y.iter().skip(1).product();
        if flat != classes {
            return Err(Error::Shape {
                op: "build",
                detail: format!("decryption stack yields {y:?}, expected {classes} class scores"),
            });
        }
        Ok(Self { arch, variant, g, phi, d, classes, input_shape, feature_shape: a[1..].to_vec() })
    }

    pub fn arch_string(&self) -> String {
        self.arch.to_string()
    }

    /// Shape of Φ's output for a batch of `n`.
    pub fn phi_out_shape(&self, n: usize) -> Result<Vec<usize>> {
        let mut s = vec![n];
        s.extend_from_slice(&self.feature_shape);
        self.phi.out_shape(&s)
    }

    /// Allocates and initializes all parameters.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        self.g.init(&mut store, &mut rng)?;
        self.phi.init(&mut store, &mut rng)?;
        self.d.init(&mut store, &mut rng)?;
        Ok(store)
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self.init_params::<f32>(0)?.num_trainable())
    }

    /// Numeric audit of Φ with the given parameters on a batch of `batch`.
    pub fn certify<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        batch: usize,
        mode: Mode,
        trials: usize,
        tol: f64,
        seed: u64,
    ) -> Result<crate::layers::EquivarianceReport> {
        let mut shape = vec![batch];
        shape.extend_from_slice(&self.feature_shape);
        certify_equivariance(&self.phi, store, &shape, mode, trials, tol, seed)
    }
}

fn conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, bias: bool) -> LayerSpec {
    LayerSpec::RealConv { in_ch, out_ch, kernel, stride, pad, bias }
}

fn cconv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> LayerSpec {
    LayerSpec::ConvNoBias { in_ch, out_ch, kernel, stride, pad }
}

/// The 3×3 generator head: output shape equals input shape.
pub fn generator_head(channels: usize) -> LayerSpec {
    conv(channels, channels, 3, 1, 1, true)
}

fn real_block(in_ch: usize, out_ch: usize, stride: usize) -> Vec<LayerSpec> {
    let shortcut = if stride == 1 && in_ch == out_ch {
        vec![]
    } else {
        vec![conv(in_ch, out_ch, 1, stride, 0, false), LayerSpec::RealBn { channels: out_ch }]
    };
    vec![
        LayerSpec::Skip {
            inner: vec![
                conv(in_ch, out_ch, 3, stride, 1, false),
                LayerSpec::RealBn { channels: out_ch },
                LayerSpec::RealRelu,
                conv(out_ch, out_ch, 3, 1, 1, false),
                LayerSpec::RealBn { channels: out_ch },
            ],
            shortcut,
        },
        LayerSpec::RealRelu,
    ]
}

fn complex_block(in_ch: usize, out_ch: usize, stride: usize) -> Vec<LayerSpec> {
    let delta = |channels| LayerSpec::Delta { mode: DeltaMode::Fixed(1.0), channels };
    let shortcut = if stride == 1 && in_ch == out_ch {
        vec![]
    } else {
        vec![cconv(in_ch, out_ch, 1, stride, 0), LayerSpec::ComplexNorm { channels: out_ch }]
    };
    vec![
        LayerSpec::Skip {
            inner: vec![
                cconv(in_ch, out_ch, 3, stride, 1),
                LayerSpec::ComplexNorm { channels: out_ch },
                delta(out_ch),
                cconv(out_ch, out_ch, 3, 1, 1),
                LayerSpec::ComplexNorm { channels: out_ch },
            ],
            shortcut,
        },
        delta(out_ch),
    ]
}

fn lenet_tail_spatial(input_shape: [usize; 3]) -> Result<usize> {
    let h = input_shape[1].min(input_shape[2]);
    if h < 16 {
        return Err(Error::Unsupported(format!("lenet needs inputs of at least 16x16, got {input_shape:?}")));
    }
    // conv5 → pool2 → conv5 → pool2
    Ok(((h - 4) / 2 - 4) / 2)
}

fn build_lenet(variant: Variant, classes: usize, input_shape: [usize; 3]) -> Result<NetworkDivision> {
    let c = input_shape[0];
    let tail = lenet_tail_spatial(input_shape)?;
    let mut g = vec![conv(c, 6, 5, 1, 0, true), LayerSpec::RealRelu];
    let (phi, d) = if variant.is_complex() {
        g.push(generator_head(6));
        let phi = vec![
            LayerSpec::MagMaxPool { window: 2, stride: 2 },
            cconv(6, 16, 5, 1, 0),
            LayerSpec::Delta { mode: DeltaMode::Channelwise, channels: 16 },
            LayerSpec::MagMaxPool { window: 2, stride: 2 },
            cconv(16, 120, tail, 1, 0),
            LayerSpec::Delta { mode: DeltaMode::Channelwise, channels: 120 },
            cconv(120, 84, 1, 1, 0),
            LayerSpec::Delta { mode: DeltaMode::Channelwise, channels: 84 },
            cconv(84, classes, 1, 1, 0),
        ];
        (phi, vec![LayerSpec::Softmax])
    } else {
        if variant == Variant::AdditionalLayers {
            g.push(generator_head(6));
        }
        let d = vec![
            LayerSpec::RealMaxPool { window: 2, stride: 2 },
            conv(6, 16, 5, 1, 0, true),
            LayerSpec::RealRelu,
            LayerSpec::RealMaxPool { window: 2, stride: 2 },
            conv(16, 120, tail, 1, 0, true),
            LayerSpec::RealRelu,
            conv(120, 84, 1, 1, 0, true),
            LayerSpec::RealRelu,
            conv(84, classes, 1, 1, 0, true),
            LayerSpec::Softmax,
        ];
        (vec![], d)
    };
    NetworkDivision::new(
        Arch::LeNet,
        variant,
        Sequential::new("g", g),
        Sequential::new("phi", phi),
        Sequential::new("d", d),
        classes,
        input_shape,
    )
}

fn build_resnet(
    depth: usize,
    split: ResNetSplit,
    variant: Variant,
    classes: usize,
    input_shape: [usize; 3],
) -> Result<NetworkDivision> {
    let n = Arch::blocks_per_stage(depth)?;
    let (h, w) = (input_shape[1], input_shape[2]);
    if h % 4 != 0 || w % 4 != 0 || h < 8 || h != w {
        return Err(Error::Unsupported(format!("resnet needs square inputs divisible by 4, got {input_shape:?}")));
    }
    let final_spatial = h / 4;
    let mut g = vec![conv(input_shape[0], 16, 3, 1, 1, false), LayerSpec::RealBn { channels: 16 }, LayerSpec::RealRelu];
    for _ in 0..n {
        g.extend(real_block(16, 16, 1));
    }
    let head = vec![
        LayerSpec::AvgPool { window: final_spatial, stride: final_spatial },
        LayerSpec::RealFc { in_features: 64, out_features: classes },
        LayerSpec::Softmax,
    ];
    let (phi, mut d) = if variant.is_complex() {
        g.push(generator_head(16));
        let mut phi = Vec::new();
        for i in 0..n {
            phi.extend(complex_block(if i == 0 { 16 } else { 32 }, 32, if i == 0 { 2 } else { 1 }));
        }
        phi.extend(complex_block(32, 64, 2));
        let d_blocks = match split {
            ResNetSplit::Alpha => n - 1,
            ResNetSplit::Beta => 1,
        };
        let mut d = Vec::new();
        for _ in 0..d_blocks {
            d.extend(real_block(64, 64, 1));
        }
        (phi, d)
    } else {
        if variant == Variant::AdditionalLayers {
            g.push(generator_head(16));
        }
        let mut d = Vec::new();
        for i in 0..n {
            d.extend(real_block(if i == 0 { 16 } else { 32 }, 32, if i == 0 { 2 } else { 1 }));
        }
        for i in 0..n {
            d.extend(real_block(if i == 0 { 32 } else { 64 }, 64, if i == 0 { 2 } else { 1 }));
        }
        (vec![], d)
    };
    d.extend(head);
    NetworkDivision::new(
        Arch::ResNet { depth, split },
        variant,
        Sequential::new("g", g),
        Sequential::new("phi", phi),
        Sequential::new("d", d),
        classes,
        input_shape,
    )
}

/// Builds the complex pipeline for `arch` and audits its Φ numerically on a
/// throwaway initialization.
pub fn build(arch: Arch, classes: usize, input_shape: [usize; 3]) -> Result<NetworkDivision> {
    let net = build_division(arch, Variant::Complex, classes, input_shape)?;
    audit(&net)?;
    Ok(net)
}

/// Like [`build`], with every δ layer of Φ switched to `delta`.
pub fn build_with_delta(arch: Arch, classes: usize, input_shape: [usize; 3], delta: DeltaMode) -> Result<NetworkDivision> {
    let mut net = build_division(arch, Variant::Complex, classes, input_shape)?;
    let layers = net.phi.layers().iter().map(|l| with_delta(l, delta)).collect();
    net.phi = Sequential::new(net.phi.prefix().to_string(), layers);
    audit(&net)?;
    Ok(net)
}

fn with_delta(layer: &LayerSpec, delta: DeltaMode) -> LayerSpec {
    match layer {
        LayerSpec::Delta { channels, .. } => LayerSpec::Delta { mode: delta, channels: *channels },
        LayerSpec::Skip { inner, shortcut } => LayerSpec::Skip {
            inner: inner.iter().map(|l| with_delta(l, delta)).collect(),
            shortcut: shortcut.iter().map(|l| with_delta(l, delta)).collect(),
        },
        other => other.clone(),
    }
}

fn audit(net: &NetworkDivision) -> Result<()> {
    let store = net.init_params::<f64>(0x5eed)?;
    for mode in [Mode::Eval, Mode::Train] {
        let rep = net.certify(&store, 2, mode, 2, default_tolerance::<f64>(), 0xce47)?;
        if !rep.pass {
            return Err(Error::CertificationFailed {
                what: format!("{} processing stack ({mode:?})", net.arch),
                residual: rep.max_residual,
                tol: rep.tol,
            });
        }
    }
    Ok(())
}

/// Builds a real baseline sharing the split points of the complex pipeline.
pub fn build_baseline(arch: Arch, variant: Variant, classes: usize, input_shape: [usize; 3]) -> Result<NetworkDivision> {
    if variant.is_complex() {
        return Err(Error::Unsupported("the complex pipeline is not a baseline; use build".into()));
    }
    build_division(arch, variant, classes, input_shape)
}

fn build_division(arch: Arch, variant: Variant, classes: usize, input_shape: [usize; 3]) -> Result<NetworkDivision> {
    match arch {
        Arch::LeNet => build_lenet(variant, classes, input_shape),
        Arch::ResNet { depth, split } => build_resnet(depth, split, variant, classes, input_shape),
    }
}

/// A division together with its parameters.
#[derive(Debug)]
pub struct Model<T> {
    pub net: NetworkDivision,
    pub store: ParamStore<T>,
}

impl<T: Scalar> Clone for Model<T> {
    fn clone(&self) -> Self {
        Self { net: self.net.clone(), store: self.store.clone() }
    }
}

impl<T: Scalar> Model<T> {
    pub fn new(net: NetworkDivision, seed: u64) -> Result<Self> {
        let store = net.init_params(seed)?;
        Ok(Self { net, store })
    }

    pub(crate) fn check_images(&self, images: &Tensor<T>) -> Result<()> {
        let s = images.shape();
        if s.len() != 4 || s[1..] != self.net.input_shape {
            return Err(Error::Shape {
                op: "forward",
                detail: format!("images {s:?} do not match input shape {:?}", self.net.input_shape),
            });
        }
        Ok(())
    }

    /// `a = g(I)` on the tape.
    pub fn encode(&self, tape: &mut Tape<T>, images: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        self.net.g.forward(tape, &self.store, images, ctx)
    }
}

/// Forward pass of a real baseline: `d(g(I))`, with the noisy variant adding
/// magnitude-matched noise after `g` (drawn from `rng`).
pub fn forward_plain<T: Scalar>(model: &Model<T>, images: &Tensor<T>, rng: &mut Rng) -> Result<Tensor<T>> {
    if model.net.variant.is_complex() {
        return Err(Error::Unsupported("forward_plain runs real baselines; use the secure pipeline".into()));
    }
    model.check_images(images)?;
    let mut ctx = Ctx::new(Mode::Eval);
    let a = model.net.g.apply(&model.store, Value::Real(images.clone()), &mut ctx)?.into_real()?;
    let a = match model.net.variant {
        Variant::Noisy { gamma } => noisy_feature(&a, gamma, rng)?,
        _ => a,
    };
    model.net.d.apply(&model.store, Value::Real(a), &mut ctx)?.into_real()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerKind;

    const IMG: [usize; 3] = [3, 32, 32];

    #[test]
    fn parse_and_display_round_trip() {
        for s in ["lenet", "resnet20-alpha", "resnet32-beta", "resnet110-alpha"] {
            assert_eq!(s.parse::<Arch>().unwrap().to_string(), s);
        }
        for bad in ["resnet21-alpha", "resnet20", "vgg16", "resnet8-alpha", "resnet20-gamma"] {
            assert!(bad.parse::<Arch>().is_err(), "{bad}");
        }
    }

    #[test]
    fn lenet_decryption_is_exactly_softmax() {
        let net = build(Arch::LeNet, 10, IMG).unwrap();
        assert_eq!(net.d.layers(), &[LayerSpec::Softmax]);
        assert_eq!(net.feature_shape, vec![6, 28, 28]);
        assert_eq!(net.g.layers().last().unwrap(), &generator_head(6));
    }

    #[test]
    fn alpha_and_beta_share_g_and_phi() {
        let a = build("resnet20-alpha".parse().unwrap(), 10, IMG).unwrap();
        let b = build("resnet20-beta".parse().unwrap(), 10, IMG).unwrap();
        assert_eq!(a.g, b.g);
        assert_eq!(a.phi, b.phi);
        assert_ne!(a.d, b.d);
        assert_eq!(a.feature_shape, vec![16, 32, 32]);
        assert_eq!(a.phi_out_shape(2).unwrap(), vec![2, 64, 8, 8]);
    }

    #[test]
    fn resnet56_beta_drops_middle_blocks() {
        let a = build_division("resnet56-alpha".parse().unwrap(), Variant::Complex, 10, IMG).unwrap();
        let b = build_division("resnet56-beta".parse().unwrap(), Variant::Complex, 10, IMG).unwrap();
        let skips = |s: &Sequential| s.layers().iter().filter(|l| l.kind() == LayerKind::Skip).count();
        assert_eq!(skips(&a.d), 8);
        assert_eq!(skips(&b.d), 1);
    }

    #[test]
    fn relu_inside_phi_is_rejected() {
        let net = build(Arch::LeNet, 10, IMG).unwrap();
        let mut layers = net.phi.layers().to_vec();
        layers.insert(2, LayerSpec::RealRelu);
        let err = NetworkDivision::new(
            net.arch,
            net.variant,
            net.g.clone(),
            Sequential::new("phi", layers),
            net.d.clone(),
            10,
            IMG,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Uncertified(_)));
    }

    #[test]
    fn baseline_parameter_counts_and_arity() {
        let orig = build_baseline(Arch::LeNet, Variant::Original, 10, IMG).unwrap();
        let add = build_baseline(Arch::LeNet, Variant::AdditionalLayers, 10, IMG).unwrap();
        let noisy = build_baseline(Arch::LeNet, Variant::Noisy { gamma: 0.5 }, 10, IMG).unwrap();
        assert!(orig.parameter_count().unwrap() < add.parameter_count().unwrap());
        for net in [&orig, &add, &noisy] {
            assert!(net.phi.is_empty());
            assert_eq!(net.classes, 10);
        }
        assert!(build_baseline(Arch::LeNet, Variant::Complex, 10, IMG).is_err());
        assert!(build(Arch::LeNet, 1, IMG).is_err());
    }

    #[test]
    fn forward_plain_shapes_determinism_and_softmax() {
        let net = build_baseline("resnet20-alpha".parse().unwrap(), Variant::Original, 10, IMG).unwrap();
        let model = Model::<f32>::new(net, 1).unwrap();
        let mut rng = Rng::new(2);
        let x: Tensor<f32> = rng.sample_uniform(0.0, 1.0, &[1, 3, 32, 32]);
        let y1 = forward_plain(&model, &x, &mut Rng::new(0)).unwrap();
        let y2 = forward_plain(&model, &x, &mut Rng::new(0)).unwrap();
        assert_eq!(y1.shape(), &[1, 10]);
        assert_eq!(y1, y2);
        let lenet = Model::<f64>::new(build_baseline(Arch::LeNet, Variant::Original, 10, IMG).unwrap(), 3).unwrap();
        let xb: Tensor<f64> = rng.sample_uniform(0.0, 1.0, &[4, 3, 32, 32]);
        let p = crate::layers::softmax(&forward_plain(&lenet, &xb, &mut rng).unwrap());
        for row in p.data().chunks(10) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let wrong: Tensor<f64> = Tensor::zeros(&[1, 3, 28, 28]);
        assert!(forward_plain(&lenet, &wrong, &mut rng).is_err());
    }

    #[test]
    fn delta_override_reaches_every_delta_layer() {
        fn modes(layers: &[LayerSpec], out: &mut Vec<DeltaMode>) {
            for l in layers {
                match l {
                    LayerSpec::Delta { mode, .. } => out.push(*mode),
                    LayerSpec::Skip { inner, shortcut } => {
                        modes(inner, out);
                        modes(shortcut, out);
                    }
                    _ => {}
                }
            }
        }
        for arch in [Arch::LeNet, "resnet14-alpha".parse().unwrap()] {
            let net = build_with_delta(arch, 10, IMG, DeltaMode::Fixed(0.5)).unwrap();
            let mut found = Vec::new();
            modes(net.phi.layers(), &mut found);
            assert!(!found.is_empty());
            assert!(found.iter().all(|&m| m == DeltaMode::Fixed(0.5)));
        }
    }
}
