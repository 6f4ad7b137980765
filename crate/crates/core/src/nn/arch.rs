use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BatchNorm, Conv2d, Gate, Layer, Linear, Model};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Architecture families available at desk scale.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Arch {
    /// 3x3 conv + BN + ReLU + 2x2 max-pool per width, global average pool, linear head.
    VggSmall { widths: Vec<usize> },
    /// Stem conv, `stages` stages of `blocks` residual blocks at constant width,
    /// 2x2 max-pool between stages, global average pool, linear head.
    ResnetSmall { width: usize, stages: usize, blocks: usize },
    /// `depth` hidden linear + BN + ReLU layers, then a linear head.
    MlpBn { hidden: usize, depth: usize },
}

impl Arch {
    pub fn name(&self) -> &'static str {
        match self {
            Arch::VggSmall { .. } => "vgg_small",
            Arch::ResnetSmall { .. } => "resnet_small",
            Arch::MlpBn { .. } => "mlp_bn",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Arch::VggSmall { widths } => {
                let w: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
                write!(f, "vgg_small:{}", w.join("-"))
            }
            Arch::ResnetSmall { width, stages, blocks } => write!(f, "resnet_small:{width}x{stages}x{blocks}"),
            Arch::MlpBn { hidden, depth } => write!(f, "mlp_bn:{hidden}x{depth}"),
        }
    }
}

fn parse_list(s: &str, sep: char) -> Option<Vec<usize>> {
    s.split(sep).map(|p| p.trim().parse().ok()).collect()
}

/// Parses `vgg_small[:w1-w2-..]`, `resnet_small[:WxSxB]`, `mlp_bn[:HxD]`.
impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, knobs) = match s.split_once(':') {
            Some((n, k)) => (n, Some(k)),
            None => (s, None),
        };
        let bad = || Error::UnknownArch(s.to_string());
        match name {
            "vgg_small" => {
                let widths = match knobs {
                    Some(k) => parse_list(k, '-').ok_or_else(bad)?,
                    None => vec![8, 16, 32],
                };
                if widths.is_empty() || widths.contains(&0) {
                    return Err(bad());
                }
                Ok(Arch::VggSmall { widths })
            }
            "resnet_small" => {
                let v = match knobs {
                    Some(k) => parse_list(k, 'x').ok_or_else(bad)?,
                    None => vec![16, 2, 1],
                };
                match v.as_slice() {
                    &[width, stages, blocks] if width > 0 && stages > 0 => Ok(Arch::ResnetSmall { width, stages, blocks }),
                    _ => Err(bad()),
                }
            }
            "mlp_bn" => {
                let v = match knobs {
                    Some(k) => parse_list(k, 'x').ok_or_else(bad)?,
                    None => vec![64, 2],
                };
                match v.as_slice() {
                    &[hidden, depth] if hidden > 0 => Ok(Arch::MlpBn { hidden, depth }),
                    _ => Err(bad()),
                }
            }
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for Arch {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Arch> for String {
    fn from(a: Arch) -> String {
        a.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchSpec {
    pub arch: Arch,
    pub classes: usize,
    /// `[C, H, W]`
    pub input: Vec<usize>,
}

impl ArchSpec {
    pub fn new(arch: Arch, classes: usize, input: Vec<usize>) -> Self {
        Self { arch, classes, input }
    }
}

/// Randomly initialized model (He fan-in scaling for convs, gamma=1, beta=0).
pub fn build_model<T: Real, R: Rng + ?Sized>(spec: &ArchSpec, rng: &mut R) -> Result<Model<T>> {
    if spec.classes == 0 || spec.input.len() != 3 || spec.input.contains(&0) {
        return Err(Error::invalid(format!(
            "need classes > 0 and a [C, H, W] input, got {} classes and {:?}",
            spec.classes, spec.input
        )));
    }
    let (c, h, w) = (spec.input[0], spec.input[1], spec.input[2]);
    let mut layers = Vec::new();
    match &spec.arch {
        Arch::VggSmall { widths } => {
            if h >> widths.len() == 0 || w >> widths.len() == 0 {
                return Err(Error::invalid(format!("{} pooling stages do not fit {h}x{w}", widths.len())));
            }
            let mut c_in = c;
            for &width in widths {
                layers.push(Layer::Conv2d(Conv2d::new(c_in, width, 3, 1, 1, false, rng)));
                layers.push(Layer::BatchNorm(BatchNorm::new(width)));
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool2d { kernel: 2 });
                c_in = width;
            }
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Linear(Linear::new(c_in, spec.classes, rng)));
        }
        Arch::ResnetSmall { width, stages, blocks } => {
            layers.push(Layer::Conv2d(Conv2d::new(c, *width, 3, 1, 1, false, rng)));
            layers.push(Layer::BatchNorm(BatchNorm::new(*width)));
            layers.push(Layer::Relu);
            for stage in 0..*stages {
                if stage > 0 {
                    layers.push(Layer::MaxPool2d { kernel: 2 });
                }
                for _ in 0..*blocks {
                    layers.push(Layer::SkipSave);
                    layers.push(Layer::Conv2d(Conv2d::new(*width, *width, 3, 1, 1, false, rng)));
                    layers.push(Layer::BatchNorm(BatchNorm::new(*width)));
                    layers.push(Layer::Relu);
                    layers.push(Layer::Conv2d(Conv2d::new(*width, *width, 3, 1, 1, false, rng)));
                    layers.push(Layer::BatchNorm(BatchNorm::new(*width)));
                    layers.push(Layer::SkipAdd);
                    layers.push(Layer::Relu);
                }
            }
            layers.push(Layer::GlobalAvgPool);
            layers.push(Layer::Linear(Linear::new(*width, spec.classes, rng)));
        }
        Arch::MlpBn { hidden, depth } => {
            layers.push(Layer::Flatten);
            let mut fan_in = c * h * w;
            for _ in 0..*depth {
                layers.push(Layer::Linear(Linear::new(fan_in, *hidden, rng)));
                layers.push(Layer::BatchNorm(BatchNorm::new(*hidden)));
                layers.push(Layer::Relu);
                fan_in = *hidden;
            }
            layers.push(Layer::Linear(Linear::new(fan_in, spec.classes, rng)));
        }
    }
    let model = Model {
        layers,
        input_shape: spec.input.clone(),
        classes: spec.classes,
        kind: spec.arch.to_string(),
    };
    model.layer_input_shapes()?;
    Ok(model)
}

// ------------------------------------------------------------------ layer descriptors
//
// A model's exact layer structure (including pruned widths) is stored in
// checkpoints as `;`-separated layer tokens:
//   conv(c_in,c_out,k,stride,pad,bias) bn(c) relu maxpool(k) gap flatten
//   linear(in,out) gate(c) save add

impl<T: Real> Model<T> {
    pub fn describe(&self) -> String {
        let layers: Vec<String> = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv2d(c) => format!(
                    "conv({},{},{},{},{},{})",
                    c.c_in(),
                    c.c_out(),
                    c.kernel(),
                    c.stride,
                    c.pad,
                    u8::from(c.bias.is_some())
                ),
                Layer::BatchNorm(bn) => format!("bn({})", bn.channels()),
                Layer::Relu => "relu".into(),
                Layer::MaxPool2d { kernel } => format!("maxpool({kernel})"),
                Layer::GlobalAvgPool => "gap".into(),
                Layer::Flatten => "flatten".into(),
                Layer::Linear(l) => format!("linear({},{})", l.fan_in(), l.fan_out()),
                Layer::Gate(g) => format!("gate({})", g.values.numel()),
                Layer::SkipSave => "save".into(),
                Layer::SkipAdd => "add".into(),
            })
            .collect();
        let input: Vec<String> = self.input_shape.iter().map(|v| v.to_string()).collect();
        format!(
            "kind={}|input={}|classes={}|layers={}",
            self.kind,
            input.join("x"),
            self.classes,
            layers.join(";")
        )
    }

    /// Rebuilds a zero-initialized model from [`Model::describe`] output.
    pub fn from_description(desc: &str) -> Result<Self> {
        let bad = |why: &str| Error::invalid(format!("architecture descriptor: {why}"));
        let mut kind = None;
        let mut input = None;
        let mut classes = None;
        let mut layers = None;
        for part in desc.split('|') {
            let (k, v) = part.split_once('=').ok_or_else(|| bad("missing `=`"))?;
            match k {
                "kind" => kind = Some(v.to_string()),
                "input" => input = Some(parse_list(v, 'x').ok_or_else(|| bad("input shape"))?),
                "classes" => classes = Some(v.parse::<usize>().map_err(|_| bad("classes"))?),
                "layers" => layers = Some(v.to_string()),
                _ => return Err(bad(&format!("unknown key {k}"))),
            }
        }
        let layers = layers.ok_or_else(|| bad("no layers"))?;
        let mut out = Vec::new();
        for tok in layers.split(';').filter(|t| !t.is_empty()) {
            let (name, args) = match tok.split_once('(') {
                Some((n, rest)) => (
                    n,
                    parse_list(rest.strip_suffix(')').ok_or_else(|| bad(tok))?, ',').ok_or_else(|| bad(tok))?,
                ),
                None => (tok, Vec::new()),
            };
            let layer = match (name, args.as_slice()) {
                ("conv", &[ci, co, k, s, p, b]) => Layer::Conv2d(Conv2d {
                    weight: Tensor::zeros(&[co, ci, k, k]).with_requires_grad(true),
                    bias: (b == 1).then(|| Tensor::zeros(&[co]).with_requires_grad(true)),
                    stride: s,
                    pad: p,
                }),
                ("bn", &[c]) => Layer::BatchNorm(BatchNorm::new(c)),
                ("relu", []) => Layer::Relu,
                ("maxpool", &[k]) => Layer::MaxPool2d { kernel: k },
                ("gap", []) => Layer::GlobalAvgPool,
                ("flatten", []) => Layer::Flatten,
                ("linear", &[i, o]) => Layer::Linear(Linear {
                    weight: Tensor::zeros(&[o, i]).with_requires_grad(true),
                    bias: Tensor::zeros(&[o]).with_requires_grad(true),
                }),
                ("gate", &[c]) => Layer::Gate(Gate::new(c)),
                ("save", []) => Layer::SkipSave,
                ("add", []) => Layer::SkipAdd,
                _ => return Err(bad(tok)),
            };
            out.push(layer);
        }
        let model = Model {
            layers: out,
            input_shape: input.ok_or_else(|| bad("no input"))?,
            classes: classes.ok_or_else(|| bad("no classes"))?,
            kind: kind.unwrap_or_default(),
        };
        model.layer_input_shapes()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::nn::Mode;
    use crate::rng::{stream, Stream};

    #[test]
    fn vgg_param_count_matches_closed_form() {
        let widths = [8usize, 16, 32];
        let spec = ArchSpec::new(Arch::VggSmall { widths: widths.to_vec() }, 10, vec![3, 32, 32]);
        let m: Model<f32> = build_model(&spec, &mut stream(0, Stream::Init)).unwrap();
        // conv (no bias) + bn gamma/beta per stage, then linear head
        let mut expected = 0;
        let mut c_in = 3;
        for w in widths {
            expected += c_in * w * 9 + 2 * w;
            c_in = w;
        }
        expected += 32 * 10 + 10;
        assert_eq!(m.param_count(), expected);
        assert_eq!(expected, 216 + 16 + 1152 + 32 + 4608 + 64 + 330);
    }

    #[test]
    fn mlp_depth_zero_is_single_linear() {
        let spec = ArchSpec::new(Arch::MlpBn { hidden: 16, depth: 0 }, 4, vec![1, 4, 4]);
        let m: Model<f32> = build_model(&spec, &mut stream(0, Stream::Init)).unwrap();
        let linears = m.layers.iter().filter(|l| matches!(l, Layer::Linear(_))).count();
        assert_eq!(linears, 1);
        assert_eq!(m.param_count(), 16 * 4 + 4);
    }

    #[test]
    fn resnet_on_zeros_gives_finite_logits() {
        let spec = ArchSpec::new("resnet_small".parse().unwrap(), 10, vec![3, 32, 32]);
        let m: Model<f32> = build_model(&spec, &mut stream(0, Stream::Init)).unwrap();
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(&[2, 3, 32, 32]));
        let f = m.forward(&mut g, x, Mode::Eval, false).unwrap();
        assert_eq!(g.shape(f.logits), &[2, 10]);
        assert!(g.value(f.logits).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn unknown_arch_is_rejected() {
        assert!(matches!("alexnet".parse::<Arch>(), Err(Error::UnknownArch(_))));
        assert!("vgg_small:8-x".parse::<Arch>().is_err());
    }

    #[test]
    fn arch_names_round_trip() {
        for s in ["vgg_small:8-16-32", "resnet_small:16x2x1", "mlp_bn:64x0"] {
            assert_eq!(s.parse::<Arch>().unwrap().to_string(), s);
        }
    }

    #[test]
    fn description_round_trips_structure() {
        let spec = ArchSpec::new("resnet_small:8x2x1".parse().unwrap(), 7, vec![3, 16, 16]);
        let m: Model<f32> = build_model(&spec, &mut stream(0, Stream::Init)).unwrap();
        let back = Model::<f32>::from_description(&m.describe()).unwrap();
        assert_eq!(back.describe(), m.describe());
        assert_eq!(back.param_count(), m.param_count());
    }
}
