use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Channels of the first encoder; doubles at every encoder.
    pub base_channels: usize,
    /// Event groups per window (N).
    pub groups: usize,
    /// Number of decoder layers.
    pub decoders: usize,
    /// QCFS quantization levels (L).
    pub levels: usize,
    pub height: usize,
    pub width: usize,
    /// Pixels per unit of ConvGRU2 output. The gate output lives in (-1, 1).
    pub flow_scale: f64,
    /// Adds one half level inside the QCFS floor when set.
    pub qcfs_shift: bool,
    /// Initial value of every QCFS ceiling.
    pub lambda_init: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            groups: 4,
            decoders: 1,
            levels: 4,
            height: 64,
            width: 64,
            flow_scale: 8.0,
            qcfs_shift: false,
            lambda_init: 1.0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_channels", self.base_channels),
            ("groups", self.groups),
            ("decoders", self.decoders),
            ("levels", self.levels),
            ("height", self.height),
            ("width", self.width),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        if self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::invalid(format!(
                "input {}x{} must be divisible by 16 in both dimensions",
                self.width, self.height
            )));
        }
        if !(self.flow_scale > 0.0) || !(self.lambda_init > 0.0) {
            return Err(Error::invalid("flow_scale and lambda_init must be positive"));
        }
        Ok(())
    }

    pub fn shift(&self) -> f64 {
        if self.qcfs_shift {
            0.5
        } else {
            0.0
        }
    }

    /// Output channels of encoder `level` (1-based).
    pub fn encoder_channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    /// Channels entering the decoders: three fused skips plus the bottleneck.
    pub fn fused_channels(&self) -> usize {
        (1 + 2 + 4 + 8) * self.base_channels
    }
}

/// A QCFS layer as seen by conversion and energy accounting.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpikingLayerSpec {
    /// Prefix of the layer's tensors, e.g. `encoder2` or `block1.conv2`.
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Spatial extent of the layer's output `(h, w)`.
    pub out_extent: (usize, usize),
}

/// Learnable tensors of the ANN, in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct STFlowNetParams {
    pub config: NetworkConfig,
    tensors: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

#[derive(Clone, Copy)]
enum InitKind {
    /// QCFS layers: uniform with variance 2 / fan_in.
    Rectified,
    /// Linear fusion and gate convolutions.
    Linear,
}

struct ConvDecl {
    name: String,
    cin: usize,
    cout: usize,
    init: InitKind,
    has_lambda: bool,
}

fn conv_decls(cfg: &NetworkConfig) -> Vec<ConvDecl> {
    let mut out = Vec::new();
    let mut conv = |name: String, cin, cout, init, has_lambda| {
        out.push(ConvDecl {
            name,
            cin,
            cout,
            init,
            has_lambda,
        })
    };
    let gru = |conv: &mut dyn FnMut(String, usize, usize, InitKind, bool), prefix: &str, cin: usize, cs: usize| {
        conv(format!("{prefix}.xi_r"), cs + cin, cs, InitKind::Linear, false);
        conv(format!("{prefix}.xi_z"), cs + cin, cin, InitKind::Linear, false);
        conv(format!("{prefix}.xi_i"), cs + cin, cin, InitKind::Linear, false);
    };
    gru(&mut conv, "convgru1", 2, 2);
    let b = cfg.base_channels;
    conv("encoder1".into(), 2 * cfg.groups, b, InitKind::Rectified, true);
    for l in 2..=4 {
        conv(
            format!("encoder{l}"),
            cfg.encoder_channels(l - 1),
            cfg.encoder_channels(l),
            InitKind::Rectified,
            true,
        );
    }
    let c4 = cfg.encoder_channels(4);
    for blk in 1..=2 {
        for c in 1..=2 {
            conv(format!("block{blk}.conv{c}"), c4, c4, InitKind::Rectified, true);
        }
    }
    for (name, level) in [("fuse8", 1), ("fuse4", 2), ("fuse2", 3)] {
        let ch = cfg.encoder_channels(level);
        conv(name.into(), ch, ch, InitKind::Linear, false);
    }
    let fused = cfg.fused_channels();
    for d in 1..=cfg.decoders {
        conv(format!("decoder{d}"), fused, fused, InitKind::Rectified, true);
    }
    conv("generator".into(), fused, 2, InitKind::Linear, false);
    gru(&mut conv, "convgru2", 2, 2);
    out
}

impl STFlowNetParams {
    /// Uniform fan-in scaled weights, zero biases, every ceiling at
    /// `lambda_init`. Deterministic in `seed`.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for d in conv_decls(&config) {
            let fan_in = (d.cin * 9) as f64;
            let bound = match d.init {
                InitKind::Rectified => (6.0 / fan_in).sqrt(),
                InitKind::Linear => (3.0 / fan_in).sqrt(),
            };
            let w = Tensor::from_fn(&[d.cout, d.cin, 3, 3], |_| rng.gen_range(-bound..bound));
            tensors.push((format!("{}.weight", d.name), w));
            tensors.push((format!("{}.bias", d.name), Tensor::zeros(&[d.cout])));
            if d.has_lambda {
                tensors.push((format!("{}.lambda", d.name), Tensor::scalar(config.lambda_init)));
            }
        }
        Ok(Self::from_tensors(config, tensors))
    }

    fn from_tensors(config: NetworkConfig, tensors: Vec<(String, Tensor)>) -> Self {
        let index = tensors
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
        Self {
            config,
            tensors,
            index,
        }
    }

    /// Rebuilds a parameter set from named tensors, checking that exactly the
    /// expected names are present with the expected shapes.
    pub fn from_named(config: NetworkConfig, mut named: HashMap<String, Tensor>) -> Result<Self> {
        let template = Self::init(config.clone(), 0)?;
        let mut tensors = Vec::with_capacity(template.tensors.len());
        for (name, t) in &template.tensors {
            let got = named
                .remove(name)
                .ok_or_else(|| Error::invalid(format!("missing tensor {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::shape(
                    "load",
                    format!("{name}: expected {:?}, found {:?}", t.shape(), got.shape()),
                ));
            }
            tensors.push((name.clone(), got));
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::invalid(format!("unexpected tensor {extra}")));
        }
        Ok(Self::from_tensors(config, tensors))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    /// Total learnable scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Ceiling of a QCFS layer.
    pub fn lambda(&self, layer: &str) -> Option<f64> {
        self.get(&format!("{layer}.lambda")).map(|t| t.data()[0])
    }

    /// QCFS layers in forward order.
    pub fn spiking_layers(&self) -> Vec<SpikingLayerSpec> {
        spiking_layers(&self.config)
    }

    /// Pushes every tensor onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect();
        Bound { params: self, vars }
    }
}

pub(crate) fn spiking_layers(cfg: &NetworkConfig) -> Vec<SpikingLayerSpec> {
    let (h, w) = (cfg.height, cfg.width);
    let mut out = Vec::new();
    let mut cin = 2 * cfg.groups;
    for l in 1..=4 {
        let cout = cfg.encoder_channels(l);
        out.push(SpikingLayerSpec {
            name: format!("encoder{l}"),
            in_channels: cin,
            out_channels: cout,
            stride: 2,
            out_extent: (h >> l, w >> l),
        });
        cin = cout;
    }
    for blk in 1..=2 {
        for c in 1..=2 {
            out.push(SpikingLayerSpec {
                name: format!("block{blk}.conv{c}"),
                in_channels: cin,
                out_channels: cin,
                stride: 1,
                out_extent: (h / 16, w / 16),
            });
        }
    }
    let fused = cfg.fused_channels();
    for d in 1..=cfg.decoders {
        out.push(SpikingLayerSpec {
            name: format!("decoder{d}"),
            in_channels: fused,
            out_channels: fused,
            stride: 1,
            out_extent: (h / 8, w / 8),
        });
    }
    out
}

/// Parameters bound to a tape.
pub struct Bound<'a> {
    pub params: &'a STFlowNetParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    /// The tape variable holding `name`. Panics on an unknown name, which
    /// would be a programming error in the forward pass.
    pub fn var(&self, name: &str) -> Var {
        match self.params.position(name) {
            Some(i) => self.vars[i],
            None => panic!("no parameter named {name}"),
        }
    }

    /// Tape variables in parameter order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order, zero where the tape recorded none.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .zip(self.params.iter())
            .map(|(&v, (_, t))| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }
}
