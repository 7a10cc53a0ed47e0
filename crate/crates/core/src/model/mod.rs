//! Small built-in CNN with analytic gradients.
//!
//! Architecture on a 64x64x3 input in `[0, 1]`:
//! three blocks of `conv3x3 (pad 1) -> ReLU -> maxpool 2x2` with 8, 16 and
//! 32 filters, global average pooling and one dense layer to the class
//! logits. The probed layers are the ReLU outputs of the second and third
//! blocks (before pooling) and the pooled 32-vector.

mod bundle;
mod metrics;
mod ops;
mod split;
mod train;

pub use bundle::{load_bundle, save_bundle, ArchDescription};
pub use metrics::{evaluate, ClassMetrics, PerClassMetrics};
pub use split::{split_indices, DataSplit};
pub use train::{train, LabeledImage, TrainConfig, TrainReport};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use ops::{
    conv3x3, conv3x3_backward, maxpool2, maxpool2_backward, relu_inplace, transpose_weights,
};

pub const INPUT_SIZE: usize = 64;
pub const INPUT_CHANNELS: usize = 3;
pub const INPUT_LEN: usize = INPUT_SIZE * INPUT_SIZE * INPUT_CHANNELS;
const WIDTHS: [usize; 3] = [8, 16, 32];

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub cout: usize,
    pub cin: usize,
    /// `[cout][3][3][cin]`
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl ConvLayer {
    pub fn zeros(cout: usize, cin: usize) -> Self {
        Self {
            cout,
            cin,
            weights: vec![0.0; cout * 9 * cin],
            bias: vec![0.0; cout],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub outputs: usize,
    pub inputs: usize,
    /// `[outputs][inputs]`
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl DenseLayer {
    pub fn row(&self, k: usize) -> &[f32] {
        &self.weights[k * self.inputs..(k + 1) * self.inputs]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub conv3: ConvLayer,
    pub dense: DenseLayer,
}

impl ModelParams {
    pub fn zeros(num_classes: usize) -> Self {
        Self {
            conv1: ConvLayer::zeros(WIDTHS[0], INPUT_CHANNELS),
            conv2: ConvLayer::zeros(WIDTHS[1], WIDTHS[0]),
            conv3: ConvLayer::zeros(WIDTHS[2], WIDTHS[1]),
            dense: DenseLayer {
                outputs: num_classes,
                inputs: WIDTHS[2],
                weights: vec![0.0; num_classes * WIDTHS[2]],
                bias: vec![0.0; num_classes],
            },
        }
    }

    /// He-uniform weights (`U(-sqrt(6/fan_in), +sqrt(6/fan_in))`), zero biases.
    pub fn he_uniform(num_classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(num_classes);
        let mut fill = |w: &mut [f32], fan_in: usize| {
            let limit = (6.0 / fan_in as f64).sqrt() as f32;
            for v in w.iter_mut() {
                *v = rng.gen_range(-limit..limit);
            }
        };
        fill(&mut p.conv1.weights, 9 * INPUT_CHANNELS);
        fill(&mut p.conv2.weights, 9 * WIDTHS[0]);
        fill(&mut p.conv3.weights, 9 * WIDTHS[1]);
        fill(&mut p.dense.weights, WIDTHS[2]);
        p
    }

    pub fn num_classes(&self) -> usize {
        self.dense.outputs
    }

    pub fn validate(&self) -> Result<()> {
        let convs = [
            (&self.conv1, WIDTHS[0], INPUT_CHANNELS),
            (&self.conv2, WIDTHS[1], WIDTHS[0]),
            (&self.conv3, WIDTHS[2], WIDTHS[1]),
        ];
        for (i, (c, cout, cin)) in convs.into_iter().enumerate() {
            if c.cout != cout
                || c.cin != cin
                || c.weights.len() != cout * 9 * cin
                || c.bias.len() != cout
            {
                return Err(Error::Dimension(format!(
                    "conv{} has the wrong shape",
                    i + 1
                )));
            }
        }
        let d = &self.dense;
        if d.outputs == 0
            || d.inputs != WIDTHS[2]
            || d.weights.len() != d.outputs * d.inputs
            || d.bias.len() != d.outputs
        {
            return Err(Error::Dimension("dense layer has the wrong shape".into()));
        }
        if self
            .tensors()
            .iter()
            .any(|(_, v)| v.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Numerical(
                "model parameters contain non-finite values".into(),
            ));
        }
        Ok(())
    }

    /// Named flat parameter buffers in bundle order.
    pub fn tensors(&self) -> [(&'static str, &[f32]); 8] {
        [
            ("conv1.w", &self.conv1.weights),
            ("conv1.b", &self.conv1.bias),
            ("conv2.w", &self.conv2.weights),
            ("conv2.b", &self.conv2.bias),
            ("conv3.w", &self.conv3.weights),
            ("conv3.b", &self.conv3.bias),
            ("dense.w", &self.dense.weights),
            ("dense.b", &self.dense.bias),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f32>; 8] {
        [
            &mut self.conv1.weights,
            &mut self.conv1.bias,
            &mut self.conv2.weights,
            &mut self.conv2.bias,
            &mut self.conv3.weights,
            &mut self.conv3.bias,
            &mut self.dense.weights,
            &mut self.dense.bias,
        ]
    }
}

/// Bottleneck layer whose activations are probed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerSelector {
    Conv2,
    Conv3,
    Gap,
}

impl LayerSelector {
    pub const ALL: [LayerSelector; 3] = [
        LayerSelector::Conv2,
        LayerSelector::Conv3,
        LayerSelector::Gap,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerSelector::Conv2 => "conv2",
            LayerSelector::Conv3 => "conv3",
            LayerSelector::Gap => "gap",
        }
    }

    /// Activation shape, HWC for the convolutional layers.
    pub fn shape(self) -> Vec<usize> {
        match self {
            LayerSelector::Conv2 => vec![32, 32, WIDTHS[1]],
            LayerSelector::Conv3 => vec![16, 16, WIDTHS[2]],
            LayerSelector::Gap => vec![WIDTHS[2]],
        }
    }

    pub fn dim(self) -> usize {
        self.shape().iter().product()
    }
}

impl fmt::Display for LayerSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LayerSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv2" => Ok(LayerSelector::Conv2),
            "conv3" => Ok(LayerSelector::Conv3),
            "gap" => Ok(LayerSelector::Gap),
            other => Err(Error::Layer(other.to_string())),
        }
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    input: Vec<f32>,
    r1: Vec<f32>,
    p1: Vec<f32>,
    arg1: Vec<u32>,
    r2: Vec<f32>,
    p2: Vec<f32>,
    arg2: Vec<u32>,
    r3: Vec<f32>,
    arg3: Vec<u32>,
    gap: Vec<f32>,
    pub logits: Vec<f32>,
    pub probabilities: Vec<f32>,
}

impl ForwardPass {
    pub fn activation(&self, layer: LayerSelector) -> &[f32] {
        match layer {
            LayerSelector::Conv2 => &self.r2,
            LayerSelector::Conv3 => &self.r3,
            LayerSelector::Gap => &self.gap,
        }
    }

    pub fn activation_tensor(&self, layer: LayerSelector) -> Tensor {
        Tensor::new(layer.shape(), self.activation(layer).to_vec()).expect("layer shape")
    }

    pub fn predicted_class(&self) -> usize {
        argmax(&self.logits)
    }
}

pub(crate) fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&z| f64::from(z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| (e / total) as f32).collect()
}

fn check_input(img: &[f32]) -> Result<()> {
    if img.len() != INPUT_LEN {
        return Err(Error::Dimension(format!(
            "model input must be {INPUT_SIZE}x{INPUT_SIZE}x{INPUT_CHANNELS} ({INPUT_LEN} values), got {}",
            img.len()
        )));
    }
    Ok(())
}

/// Transposed convolution kernels, prepared once per parameter set.
pub(crate) struct Prepared<'a> {
    params: &'a ModelParams,
    wt: [Vec<f32>; 3],
}

impl<'a> Prepared<'a> {
    pub(crate) fn new(params: &'a ModelParams) -> Self {
        let t = |c: &ConvLayer| transpose_weights(&c.weights, c.cout, c.cin);
        Self {
            params,
            wt: [t(&params.conv1), t(&params.conv2), t(&params.conv3)],
        }
    }

    pub(crate) fn forward(&self, img: &[f32]) -> Result<ForwardPass> {
        check_input(img)?;
        let p = self.params;
        let s = INPUT_SIZE;
        let mut r1 = conv3x3(img, s, s, INPUT_CHANNELS, &self.wt[0], &p.conv1.bias);
        relu_inplace(&mut r1);
        let (p1, arg1) = maxpool2(&r1, s, s, WIDTHS[0]);
        let s = s / 2;
        let mut r2 = conv3x3(&p1, s, s, WIDTHS[0], &self.wt[1], &p.conv2.bias);
        relu_inplace(&mut r2);
        let (p2, arg2) = maxpool2(&r2, s, s, WIDTHS[1]);
        let s = s / 2;
        let mut r3 = conv3x3(&p2, s, s, WIDTHS[1], &self.wt[2], &p.conv3.bias);
        relu_inplace(&mut r3);
        let (p3, arg3) = maxpool2(&r3, s, s, WIDTHS[2]);
        let gap = global_average(&p3, WIDTHS[2]);
        let logits = dense_forward(&p.dense, &gap);
        let probabilities = softmax(&logits);
        Ok(ForwardPass {
            input: img.to_vec(),
            r1,
            p1,
            arg1,
            r2,
            p2,
            arg2,
            r3,
            arg3,
            gap,
            logits,
            probabilities,
        })
    }

    /// Backpropagates `grad_logits` down to `stop` (inclusive), returning
    /// the gradient at that layer's activation.
    fn backward_activations(
        &self,
        fp: &ForwardPass,
        grad_logits: &[f32],
        stop: LayerSelector,
    ) -> Vec<f32> {
        let p = self.params;
        let grad_gap = dense_input_grad(&p.dense, grad_logits);
        if stop == LayerSelector::Gap {
            return grad_gap;
        }
        let grad_r3 = self.grad_r3(fp, &grad_gap);
        if stop == LayerSelector::Conv3 {
            return grad_r3;
        }
        self.grad_r2(fp, &grad_r3, None)
    }

    fn grad_r3(&self, fp: &ForwardPass, grad_gap: &[f32]) -> Vec<f32> {
        let c = WIDTHS[2];
        let cells = 8 * 8;
        let grad_p3: Vec<f32> = (0..cells * c)
            .map(|i| grad_gap[i % c] / cells as f32)
            .collect();
        maxpool2_backward(&grad_p3, &fp.arg3, fp.r3.len())
    }

    /// Gradient at `r2` given the gradient at `r3`; optionally accumulates
    /// conv3 parameter gradients.
    fn grad_r2(
        &self,
        fp: &ForwardPass,
        grad_r3: &[f32],
        conv3_grads: Option<(&mut [f32], &mut [f32])>,
    ) -> Vec<f32> {
        let grad_z3 = relu_mask(grad_r3, &fp.r3);
        let mut grad_p2 = vec![0.0; fp.p2.len()];
        conv3x3_backward(
            &fp.p2,
            16,
            16,
            WIDTHS[1],
            &self.wt[2],
            &grad_z3,
            WIDTHS[2],
            conv3_grads,
            Some(&mut grad_p2),
        );
        maxpool2_backward(&grad_p2, &fp.arg2, fp.r2.len())
    }

    /// Full parameter gradient for the loss whose logit gradient is
    /// `grad_logits`. Convolution gradients come back in the transposed
    /// layout.
    pub(crate) fn parameter_gradients(
        &self,
        fp: &ForwardPass,
        grad_logits: &[f32],
    ) -> [Vec<f32>; 8] {
        let p = self.params;
        let mut g: [Vec<f32>; 8] = [
            vec![0.0; p.conv1.weights.len()],
            vec![0.0; p.conv1.bias.len()],
            vec![0.0; p.conv2.weights.len()],
            vec![0.0; p.conv2.bias.len()],
            vec![0.0; p.conv3.weights.len()],
            vec![0.0; p.conv3.bias.len()],
            vec![0.0; p.dense.weights.len()],
            vec![0.0; p.dense.bias.len()],
        ];
        let d = &p.dense;
        for k in 0..d.outputs {
            g[7][k] = grad_logits[k];
            for j in 0..d.inputs {
                g[6][k * d.inputs + j] = grad_logits[k] * fp.gap[j];
            }
        }
        let grad_gap = dense_input_grad(d, grad_logits);
        let grad_r3 = self.grad_r3(fp, &grad_gap);
        let [g1w, g1b, g2w, g2b, g3w, g3b, _, _] = &mut g;
        let grad_r2 = self.grad_r2(fp, &grad_r3, Some((g3w.as_mut_slice(), g3b.as_mut_slice())));
        let grad_z2 = relu_mask(&grad_r2, &fp.r2);
        let mut grad_p1 = vec![0.0; fp.p1.len()];
        conv3x3_backward(
            &fp.p1,
            32,
            32,
            WIDTHS[0],
            &self.wt[1],
            &grad_z2,
            WIDTHS[1],
            Some((g2w.as_mut_slice(), g2b.as_mut_slice())),
            Some(&mut grad_p1),
        );
        let grad_r1 = maxpool2_backward(&grad_p1, &fp.arg1, fp.r1.len());
        let grad_z1 = relu_mask(&grad_r1, &fp.r1);
        conv3x3_backward(
            &fp.input,
            INPUT_SIZE,
            INPUT_SIZE,
            INPUT_CHANNELS,
            &self.wt[0],
            &grad_z1,
            WIDTHS[0],
            Some((g1w.as_mut_slice(), g1b.as_mut_slice())),
            None,
        );
        g
    }
}

fn relu_mask(grad: &[f32], activated: &[f32]) -> Vec<f32> {
    grad.iter()
        .zip(activated)
        .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
        .collect()
}

fn global_average(v: &[f32], c: usize) -> Vec<f32> {
    let cells = v.len() / c;
    let mut sums = vec![0.0f64; c];
    for (i, &x) in v.iter().enumerate() {
        sums[i % c] += f64::from(x);
    }
    sums.into_iter()
        .map(|s| (s / cells as f64) as f32)
        .collect()
}

fn dense_forward(d: &DenseLayer, x: &[f32]) -> Vec<f32> {
    (0..d.outputs)
        .map(|k| {
            let dot: f64 = d
                .row(k)
                .iter()
                .zip(x)
                .map(|(&w, &v)| f64::from(w) * f64::from(v))
                .sum();
            (dot + f64::from(d.bias[k])) as f32
        })
        .collect()
}

fn dense_input_grad(d: &DenseLayer, grad_logits: &[f32]) -> Vec<f32> {
    let mut g = vec![0.0f32; d.inputs];
    for (k, &gk) in grad_logits.iter().enumerate() {
        if gk == 0.0 {
            continue;
        }
        for (acc, &w) in g.iter_mut().zip(d.row(k)) {
            *acc += gk * w;
        }
    }
    g
}

/// Runs the network on one image (HWC, values in `[0, 1]`).
pub fn forward(params: &ModelParams, img: &[f32]) -> Result<ForwardPass> {
    Prepared::new(params).forward(img)
}

/// Gradient of the pre-softmax logit of `class` with respect to the
/// activations at `layer`, shaped like that layer.
pub fn backward_to_layer(
    params: &ModelParams,
    img: &[f32],
    class: usize,
    layer: LayerSelector,
) -> Result<Tensor> {
    let prepared = Prepared::new(params);
    let g = prepared.logit_gradient(img, class, layer)?;
    Tensor::new(layer.shape(), g)
}

impl Prepared<'_> {
    pub(crate) fn logit_gradient(
        &self,
        img: &[f32],
        class: usize,
        layer: LayerSelector,
    ) -> Result<Vec<f32>> {
        let classes = self.params.num_classes();
        if class >= classes {
            return Err(Error::Parameter(format!(
                "class {class} out of range for a {classes}-class model"
            )));
        }
        let fp = self.forward(img)?;
        let mut onehot = vec![0.0; classes];
        onehot[class] = 1.0;
        Ok(self.backward_activations(&fp, &onehot, layer))
    }
}
