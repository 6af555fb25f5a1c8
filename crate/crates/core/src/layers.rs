//! Layer wrappers that own named parameter tensors.
//!
//! Names are stable and hierarchical ("stem.conv.weight"), so optimizer
//! state and checkpoints address parameters unambiguously.

use crate::error::Result;
use crate::tensor::conv::{conv2d, depthwise_conv2d, linear, Padding};
use crate::tensor::norm::{batch_norm, dropout, RunningStats};
use crate::tensor::{Mode, Tensor};
use rand::Rng;
use std::cell::RefCell;

/// Uniform Xavier/Glorot sample in +-sqrt(6/(fan_in+fan_out)).
pub fn xavier_uniform<R: Rng>(
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
    rng: &mut R,
) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data).expect("xavier_uniform: shape/data mismatch")
}

pub struct Conv2d {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: Padding,
}

impl Conv2d {
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let (kh, kw) = kernel;
        let fan_in = cin * kh * kw;
        let fan_out = cout * kh * kw;
        Conv2d {
            name: name.to_string(),
            weight: xavier_uniform(&[cout, cin, kh, kw], fan_in, fan_out, rng),
            bias: Tensor::zeros(&[cout]),
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.padding, (1, 1))
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{}.weight", self.name), self.weight.clone()));
        out.push((format!("{}.bias", self.name), self.bias.clone()));
    }
}

pub struct DepthwiseConv2d {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
    pub padding: Padding,
}

impl DepthwiseConv2d {
    pub fn new<R: Rng>(
        name: &str,
        channels: usize,
        multiplier: usize,
        kernel: (usize, usize),
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        let (kh, kw) = kernel;
        let fan_in = kh * kw;
        let fan_out = multiplier * kh * kw;
        DepthwiseConv2d {
            name: name.to_string(),
            weight: xavier_uniform(&[channels, multiplier, kh, kw], fan_in, fan_out, rng),
            bias: Tensor::zeros(&[channels * multiplier]),
            padding,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        depthwise_conv2d(x, &self.weight, Some(&self.bias), self.padding)
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{}.weight", self.name), self.weight.clone()));
        out.push((format!("{}.bias", self.name), self.bias.clone()));
    }
}

/// Depth-wise convolution followed by a 1x1 pointwise convolution.
pub struct SeparableConv2d {
    pub depthwise: DepthwiseConv2d,
    pub pointwise: Conv2d,
}

impl SeparableConv2d {
    pub fn new<R: Rng>(
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        SeparableConv2d {
            depthwise: DepthwiseConv2d::new(&format!("{name}.dw"), cin, 1, kernel, padding, rng),
            pointwise: Conv2d::new(&format!("{name}.pw"), cin, cout, (1, 1), Padding::Valid, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.pointwise.forward(&self.depthwise.forward(x)?)
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor)>) {
        self.depthwise.params(out);
        self.pointwise.params(out);
    }
}

pub struct BatchNorm2d {
    pub name: String,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running: RefCell<RunningStats>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm2d {
            name: name.to_string(),
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running: RefCell::new(RunningStats::new(channels)),
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        batch_norm(
            x,
            &self.gamma,
            &self.beta,
            &self.running,
            mode,
            self.epsilon,
            self.momentum,
        )
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{}.gamma", self.name), self.gamma.clone()));
        out.push((format!("{}.beta", self.name), self.beta.clone()));
    }

    /// Running statistics, exported alongside parameters in checkpoints.
    pub fn state(&self, out: &mut Vec<(String, Vec<f64>)>) {
        let rs = self.running.borrow();
        out.push((format!("{}.running_mean", self.name), rs.mean.clone()));
        out.push((format!("{}.running_var", self.name), rs.var.clone()));
    }

    pub fn load_state(&self, name: &str, values: &[f64]) -> bool {
        let mut rs = self.running.borrow_mut();
        if name == format!("{}.running_mean", self.name) && values.len() == rs.mean.len() {
            rs.mean.copy_from_slice(values);
            true
        } else if name == format!("{}.running_var", self.name) && values.len() == rs.var.len() {
            rs.var.copy_from_slice(values);
            true
        } else {
            false
        }
    }
}

pub struct Linear {
    pub name: String,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng>(name: &str, n_in: usize, n_out: usize, rng: &mut R) -> Self {
        Linear {
            name: name.to_string(),
            weight: xavier_uniform(&[n_out, n_in], n_in, n_out, rng),
            bias: Tensor::zeros(&[n_out]),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        linear(x, &self.weight, Some(&self.bias))
    }

    pub fn params(&self, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{}.weight", self.name), self.weight.clone()));
        out.push((format!("{}.bias", self.name), self.bias.clone()));
    }
}

pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        Dropout { p }
    }

    pub fn forward<R: Rng>(&self, x: &Tensor, mode: Mode, rng: &mut R) -> Result<Tensor> {
        dropout(x, self.p, mode, rng)
    }
}
