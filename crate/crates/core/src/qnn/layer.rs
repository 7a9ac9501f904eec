use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    pub(crate) fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Tanh => 2,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Tanh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerKind {
    /// Row-major `[outputs][inputs]` weights.
    Dense { inputs: usize, outputs: usize },
    /// Valid (no padding), stride-1 convolution with `[out][in][k][k]`
    /// weights. Input and output are channel-major flattened images.
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        in_h: usize,
        in_w: usize,
    },
}

/// One quantized layer: `dequantized weight = scale * code`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub kind: LayerKind,
    pub activation: Activation,
    pub scale: f64,
    pub codes: Vec<i8>,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn input_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv2d {
                in_ch, in_h, in_w, ..
            } => in_ch * in_h * in_w,
        }
    }

    pub fn output_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv2d {
                out_ch,
                kernel,
                in_h,
                in_w,
                ..
            } => out_ch * (in_h + 1 - kernel) * (in_w + 1 - kernel),
        }
    }

    pub fn weight_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => inputs * outputs,
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => out_ch * in_ch * kernel * kernel,
        }
    }

    pub fn bias_len(&self) -> usize {
        match self.kind {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv2d { out_ch, .. } => out_ch,
        }
    }

    pub fn dequantized(&self) -> Vec<f64> {
        self.codes.iter().map(|&c| self.scale * c as f64).collect()
    }

    /// Pre-activation output for one sample.
    pub(crate) fn affine(&self, w: &[f64], x: &[f64], z: &mut [f64]) {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                for o in 0..outputs {
                    let row = &w[o * inputs..(o + 1) * inputs];
                    let mut acc = self.bias[o];
                    for (wi, xi) in row.iter().zip(x) {
                        acc += wi * xi;
                    }
                    z[o] = acc;
                }
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                in_h,
                in_w,
            } => {
                let (oh, ow) = (in_h + 1 - kernel, in_w + 1 - kernel);
                for oc in 0..out_ch {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = self.bias[oc];
                            for ic in 0..in_ch {
                                for ky in 0..kernel {
                                    let wrow = ((oc * in_ch + ic) * kernel + ky) * kernel;
                                    let xrow = (ic * in_h + y + ky) * in_w + xx;
                                    for kx in 0..kernel {
                                        acc += w[wrow + kx] * x[xrow + kx];
                                    }
                                }
                            }
                            z[(oc * oh + y) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
    }

    /// Accumulates the weight gradient and writes the input gradient given
    /// the gradient at the pre-activation output.
    pub(crate) fn backward(
        &self,
        w: &[f64],
        x: &[f64],
        dz: &[f64],
        dw: &mut [f64],
        dx: Option<&mut [f64]>,
    ) {
        match self.kind {
            LayerKind::Dense { inputs, outputs } => {
                for o in 0..outputs {
                    let g = dz[o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut dw[o * inputs..(o + 1) * inputs];
                    for (d, xi) in row.iter_mut().zip(x) {
                        *d += g * xi;
                    }
                }
                if let Some(dx) = dx {
                    dx.iter_mut().for_each(|v| *v = 0.0);
                    for o in 0..outputs {
                        let g = dz[o];
                        if g == 0.0 {
                            continue;
                        }
                        let row = &w[o * inputs..(o + 1) * inputs];
                        for (d, wi) in dx.iter_mut().zip(row) {
                            *d += g * wi;
                        }
                    }
                }
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel,
                in_h,
                in_w,
            } => {
                let (oh, ow) = (in_h + 1 - kernel, in_w + 1 - kernel);
                let mut dx = dx;
                if let Some(dx) = dx.as_deref_mut() {
                    dx.iter_mut().for_each(|v| *v = 0.0);
                }
                for oc in 0..out_ch {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let g = dz[(oc * oh + y) * ow + xx];
                            if g == 0.0 {
                                continue;
                            }
                            for ic in 0..in_ch {
                                for ky in 0..kernel {
                                    let wrow = ((oc * in_ch + ic) * kernel + ky) * kernel;
                                    let xrow = (ic * in_h + y + ky) * in_w + xx;
                                    for kx in 0..kernel {
                                        dw[wrow + kx] += g * x[xrow + kx];
                                    }
                                    if let Some(dx) = dx.as_deref_mut() {
                                        for kx in 0..kernel {
                                            dx[xrow + kx] += g * w[wrow + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
