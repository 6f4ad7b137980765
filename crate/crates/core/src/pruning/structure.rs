use crate::error::{Error, Result};
use crate::nn::{Gate, Layer, Model};
use crate::real::Real;
use crate::tensor::Tensor;

/// How a layer reads the channels of a space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Consumer {
    /// Conv input channels (weight dim 1).
    Conv(usize),
    /// Linear input features; channel `c` owns features `c*span..(c+1)*span`.
    Linear { layer: usize, span: usize },
}

/// A set of channels that must be pruned together: the outputs of every conv
/// writing into it (several when joined by skip connections), the per-channel
/// layers acting on it and the layers reading it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelSpace {
    pub producers: Vec<usize>,
    /// Batch-norm and gate layers.
    pub channel_layers: Vec<usize>,
    pub consumers: Vec<Consumer>,
    pub width: usize,
}

impl ChannelSpace {
    /// Smallest producing layer index, used for tie-breaking.
    pub fn first_layer(&self) -> usize {
        self.producers[0]
    }

    pub fn gates<'a, T: Real>(&'a self, model: &'a Model<T>) -> impl Iterator<Item = usize> + 'a {
        self.channel_layers
            .iter()
            .copied()
            .filter(|&i| matches!(model.layers[i], Layer::Gate(_)))
    }
}

struct Dsu(Vec<usize>);

impl Dsu {
    fn find(&mut self, x: usize) -> usize {
        let p = self.0[x];
        if p == x {
            return x;
        }
        let r = self.find(p);
        self.0[x] = r;
        r
    }
}

/// Channel spaces produced by convolutions, ordered by first producer.
pub fn channel_spaces<T: Real>(model: &Model<T>) -> Result<Vec<ChannelSpace>> {
    let shapes = model.layer_input_shapes()?;
    // one raw space per conv, merged at skip-adds
    let mut raw_producer = Vec::new();
    let mut dsu = Dsu(Vec::new());
    let mut members: Vec<(usize, Role)> = Vec::new();
    let mut cur: Option<usize> = None;
    let mut span = 1;
    let mut stack = Vec::new();
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            Layer::Conv2d(_) => {
                if let Some(s) = cur {
                    members.push((s, Role::Consumer(Consumer::Conv(i))));
                }
                let id = raw_producer.len();
                raw_producer.push(i);
                dsu.0.push(id);
                cur = Some(id);
                span = 1;
            }
            Layer::BatchNorm(_) | Layer::Gate(_) => {
                if let Some(s) = cur {
                    members.push((s, Role::Channel(i)));
                }
            }
            Layer::Relu | Layer::MaxPool2d { .. } | Layer::GlobalAvgPool => {}
            Layer::Flatten => {
                span = shapes[i].iter().skip(1).product();
            }
            Layer::Linear(_) => {
                if let Some(s) = cur {
                    members.push((s, Role::Consumer(Consumer::Linear { layer: i, span })));
                }
                cur = None;
                span = 1;
            }
            Layer::SkipSave => stack.push(cur),
            Layer::SkipAdd => {
                let saved = stack
                    .pop()
                    .ok_or_else(|| Error::Pruning(format!("layer {i}: unmatched skip-add")))?;
                match (saved, cur) {
                    (Some(a), Some(b)) => {
                        let (ra, rb) = (dsu.find(a), dsu.find(b));
                        let (lo, hi) = (ra.min(rb), ra.max(rb));
                        dsu.0[hi] = lo;
                        cur = Some(lo);
                    }
                    (None, None) => {}
                    _ => {
                        return Err(Error::Pruning(format!(
                            "layer {i}: skip-add joins conv channels with unprunable input"
                        )))
                    }
                }
            }
        }
    }
    let mut roots: Vec<usize> = Vec::new();
    let mut spaces: Vec<ChannelSpace> = Vec::new();
    let slot = |root: usize, roots: &mut Vec<usize>, spaces: &mut Vec<ChannelSpace>| -> usize {
        match roots.iter().position(|&r| r == root) {
            Some(k) => k,
            None => {
                roots.push(root);
                spaces.push(ChannelSpace {
                    producers: Vec::new(),
                    channel_layers: Vec::new(),
                    consumers: Vec::new(),
                    width: 0,
                });
                spaces.len() - 1
            }
        }
    };
    for (id, &layer) in raw_producer.iter().enumerate() {
        let root = dsu.find(id);
        let k = slot(root, &mut roots, &mut spaces);
        spaces[k].producers.push(layer);
        if let Layer::Conv2d(c) = &model.layers[layer] {
            spaces[k].width = c.c_out();
        }
    }
    for (id, role) in members {
        let root = dsu.find(id);
        let k = slot(root, &mut roots, &mut spaces);
        match role {
            Role::Channel(l) => spaces[k].channel_layers.push(l),
            Role::Consumer(c) => spaces[k].consumers.push(c),
        }
    }
    for s in &mut spaces {
        s.producers.sort_unstable();
        s.channel_layers.sort_unstable();
    }
    spaces.sort_by_key(|s| s.first_layer());
    Ok(spaces)
}

enum Role {
    Channel(usize),
    Consumer(Consumer),
}

/// Inserts a gate after each conv (after its batch-norm when one follows).
/// Layers that already carry a gate are left alone.
pub fn insert_gates<T: Real>(model: &mut Model<T>) -> Result<()> {
    let mut i = 0;
    while i < model.layers.len() {
        if let Layer::Conv2d(c) = &model.layers[i] {
            let width = c.c_out();
            let mut at = i + 1;
            if matches!(model.layers.get(at), Some(Layer::BatchNorm(_))) {
                at += 1;
            }
            if !matches!(model.layers.get(at), Some(Layer::Gate(_))) {
                model.layers.insert(at, Layer::Gate(Gate::new(width)));
            }
            i = at;
        }
        i += 1;
    }
    model.layer_input_shapes()?;
    Ok(())
}

/// Sets the gates of `channel` in `space` to `value` (0 masks the filter).
pub fn set_gate<T: Real>(model: &mut Model<T>, space: &ChannelSpace, channel: usize, value: T) -> Result<()> {
    let gates: Vec<usize> = space.gates(model).collect();
    if gates.is_empty() {
        return Err(Error::Pruning("channel space has no gate layers; call insert_gates".into()));
    }
    for i in gates {
        if let Layer::Gate(g) = &mut model.layers[i] {
            let n = g.values.numel();
            *g.values.data_mut().get_mut(channel).ok_or_else(|| {
                Error::Pruning(format!("channel {channel} out of range for gate of width {n}"))
            })? = value;
        }
    }
    Ok(())
}

fn keep_along<T: Real>(t: &Tensor<T>, axis: usize, keep: &[usize], span: usize) -> Tensor<T> {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let dim = shape[axis];
    let mut data = Vec::with_capacity(outer * keep.len() * span * inner);
    for o in 0..outer {
        for &k in keep {
            let start = (o * dim + k * span) * inner;
            data.extend_from_slice(&t.data()[start..start + span * inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len() * span;
    Tensor::from_vec(&new_shape, data)
        .expect("kept slice has the declared shape")
        .with_requires_grad(t.requires_grad())
}

/// Physically deletes `channels` (indices into the space) from every layer
/// touching the space. At least one channel must remain.
pub fn remove_channels<T: Real>(model: &mut Model<T>, space: &ChannelSpace, channels: &[usize]) -> Result<()> {
    let mut drop = channels.to_vec();
    drop.sort_unstable();
    drop.dedup();
    if drop.iter().any(|&c| c >= space.width) {
        return Err(Error::Pruning(format!("channel index out of range for width {}", space.width)));
    }
    if drop.len() >= space.width {
        return Err(Error::Pruning(format!(
            "cannot remove all {} filters produced by layer {}",
            space.width,
            space.first_layer()
        )));
    }
    let keep: Vec<usize> = (0..space.width).filter(|c| drop.binary_search(c).is_err()).collect();
    for &i in &space.producers {
        if let Layer::Conv2d(c) = &mut model.layers[i] {
            c.weight = keep_along(&c.weight, 0, &keep, 1);
            if let Some(b) = &c.bias {
                c.bias = Some(keep_along(b, 0, &keep, 1));
            }
        }
    }
    for &i in &space.channel_layers {
        match &mut model.layers[i] {
            Layer::BatchNorm(bn) => {
                bn.gamma = keep_along(&bn.gamma, 0, &keep, 1);
                bn.beta = keep_along(&bn.beta, 0, &keep, 1);
                bn.running_mean = keep_along(&bn.running_mean, 0, &keep, 1);
                bn.running_var = keep_along(&bn.running_var, 0, &keep, 1);
            }
            Layer::Gate(g) => g.values = keep_along(&g.values, 0, &keep, 1),
            _ => {}
        }
    }
    for &c in &space.consumers {
        match c {
            Consumer::Conv(i) => {
                if let Layer::Conv2d(conv) = &mut model.layers[i] {
                    conv.weight = keep_along(&conv.weight, 1, &keep, 1);
                }
            }
            Consumer::Linear { layer, span } => {
                if let Layer::Linear(l) = &mut model.layers[layer] {
                    l.weight = keep_along(&l.weight, 1, &keep, span);
                }
            }
        }
    }
    model.layer_input_shapes()?;
    Ok(())
}
