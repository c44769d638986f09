//! Convolutional pseudo-inverse mapping an observation window `(Y, R^-1)` to an initial state.
//!
//! Five 3x3 convolutions at full resolution (circular padding along space,
//! zero padding along time), ReLU after the first four, then a dense layer
//! from the flattened feature maps to the state. Backpropagation is written
//! out by hand; all parameters live in one flat vector so the optimiser and
//! the checkpoint format see a single array.
//!
//! Parameter layout, in order: for each conv layer `weight[out][in][3][3]`
//! then `bias[out]`; then the dense `weight[n_space][features]` and
//! `bias[n_space]`, where `features = channels_last * n_times * n_space`
//! flattened as `[channel][time][space]`.

mod adam;
mod checkpoint;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::observation::ObservationSet;
use crate::rng;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};

const KERNEL: usize = 3;
const TAPS: usize = KERNEL * KERNEL;

/// Number of input maps: observed values and precisions.
pub const INPUT_CHANNELS: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub n_times: usize,
    pub n_space: usize,
    /// Output channels of each conv layer; the last one feeds the dense layer.
    pub channels: Vec<usize>,
}

impl Architecture {
    pub fn new(n_times: usize, n_space: usize, channels: Vec<usize>) -> Result<Self> {
        let arch = Self {
            n_times,
            n_space,
            channels,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// Five layers of widths 32, 32, 32, 32, 4.
    pub fn standard(n_times: usize, n_space: usize) -> Self {
        Self {
            n_times,
            n_space,
            channels: vec![32, 32, 32, 32, 4],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_times == 0 || self.n_space == 0 {
            return Err(Error::invalid("network input maps must be non-empty"));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::invalid("every conv layer needs at least one channel"));
        }
        Ok(())
    }

    fn pixels(&self) -> usize {
        self.n_times * self.n_space
    }

    fn conv_shapes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        std::iter::once(INPUT_CHANNELS)
            .chain(self.channels.iter().copied())
            .zip(self.channels.iter().copied())
    }

    pub fn features(&self) -> usize {
        self.channels.last().copied().unwrap_or(0) * self.pixels()
    }

    pub fn n_params(&self) -> usize {
        let conv: usize = self.conv_shapes().map(|(i, o)| o * i * TAPS + o).sum();
        conv + self.n_space * self.features() + self.n_space
    }

    fn layout(&self) -> Layout {
        let mut conv = Vec::with_capacity(self.channels.len());
        let mut at = 0;
        for (c_in, c_out) in self.conv_shapes() {
            let weight = at;
            let bias = weight + c_out * c_in * TAPS;
            at = bias + c_out;
            conv.push(ConvSlot {
                c_in,
                c_out,
                weight,
                bias,
            });
        }
        let dense_weight = at;
        let dense_bias = dense_weight + self.n_space * self.features();
        Layout {
            conv,
            dense_weight,
            dense_bias,
            end: dense_bias + self.n_space,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlot {
    c_in: usize,
    c_out: usize,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    conv: Vec<ConvSlot>,
    dense_weight: usize,
    dense_bias: usize,
    end: usize,
}

/// Fixed input scaling applied to both channels before the first layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub y_scale: f64,
    pub r_inv_scale: f64,
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            y_scale: 10.0,
            r_inv_scale: 16.0,
        }
    }
}

impl Normalization {
    /// Stacks `y / y_scale` and `r_inv / r_inv_scale` as `[2][time][space]`.
    pub fn input(&self, obs: &ObservationSet) -> Vec<f64> {
        obs.y()
            .iter()
            .map(|v| v / self.y_scale)
            .chain(obs.r_inv().iter().map(|p| p / self.r_inv_scale))
            .collect()
    }
}

/// Activations retained by [`ConvNet::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Padded input of every conv layer, `[channel][n_times + 2][n_space + 2]`.
    padded: Vec<Vec<f64>>,
    /// Pre-activations of every conv layer, `[channel][time][space]`.
    pre: Vec<Vec<f64>>,
    n_params: usize,
}

impl ForwardCache {
    /// Output maps of the last conv layer (the dense layer input).
    pub fn features(&self) -> &[f64] {
        self.pre.last().map(Vec::as_slice).unwrap_or(&[])
    }

    /// Pre-activation maps of conv layer `layer`.
    pub fn pre_activation(&self, layer: usize) -> &[f64] {
        &self.pre[layer]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub arch: Architecture,
    pub norm: Normalization,
    pub params: Vec<f64>,
}

fn pad(maps: &[f64], channels: usize, nt: usize, ns: usize) -> Vec<f64> {
    let (h, w) = (nt + 2, ns + 2);
    let mut out = vec![0.0; channels * h * w];
    for c in 0..channels {
        for t in 0..nt {
            let src = &maps[(c * nt + t) * ns..(c * nt + t + 1) * ns];
            let row = &mut out[(c * h + t + 1) * w..(c * h + t + 2) * w];
            row[1..=ns].copy_from_slice(src);
            row[0] = src[ns - 1];
            row[ns + 1] = src[0];
        }
    }
    out
}

/// Folds a gradient on the padded grid back onto the unpadded maps.
fn unpad_grad(padded: &[f64], channels: usize, nt: usize, ns: usize) -> Vec<f64> {
    let (h, w) = (nt + 2, ns + 2);
    let mut out = vec![0.0; channels * nt * ns];
    for c in 0..channels {
        for t in 0..nt {
            let row = &padded[(c * h + t + 1) * w..(c * h + t + 2) * w];
            let dst = &mut out[(c * nt + t) * ns..(c * nt + t + 1) * ns];
            dst.copy_from_slice(&row[1..=ns]);
            dst[ns - 1] += row[0];
            dst[0] += row[ns + 1];
        }
    }
    out
}

impl ConvNet {
    /// He-uniform weights, zero biases.
    pub fn init(arch: Architecture, norm: Normalization, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        let mut params = vec![0.0; layout.end];
        let mut rng = rng::stream(seed, 0);
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for w in slice {
                *w = rng.random_range(-bound..bound);
            }
        };
        for slot in &layout.conv {
            fill(&mut params[slot.weight..slot.bias], slot.c_in * TAPS);
        }
        fill(&mut params[layout.dense_weight..layout.dense_bias], arch.features());
        Ok(Self { arch, norm, params })
    }

    pub fn zeros(arch: Architecture, norm: Normalization) -> Result<Self> {
        arch.validate()?;
        let params = vec![0.0; arch.n_params()];
        Ok(Self { arch, norm, params })
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        check_len(self.arch.n_params(), self.params.len())?;
        check_len(INPUT_CHANNELS * self.arch.pixels(), input.len())
    }

    /// Maps normalized input `[2][time][space]` to a state estimate.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_input(input)?;
        let (nt, ns) = (self.arch.n_times, self.arch.n_space);
        let (h, w) = (nt + 2, ns + 2);
        let px = nt * ns;
        let layout = self.arch.layout();
        let last = layout.conv.len() - 1;
        let mut padded = Vec::with_capacity(layout.conv.len());
        let mut pre = Vec::with_capacity(layout.conv.len());
        let mut act = input.to_vec();
        for (l, slot) in layout.conv.iter().enumerate() {
            let pin = pad(&act, slot.c_in, nt, ns);
            let weights = &self.params[slot.weight..slot.bias];
            let biases = &self.params[slot.bias..slot.bias + slot.c_out];
            let mut z = vec![0.0; slot.c_out * px];
            for o in 0..slot.c_out {
                let out = &mut z[o * px..(o + 1) * px];
                out.fill(biases[o]);
                for i in 0..slot.c_in {
                    let kernel = &weights[(o * slot.c_in + i) * TAPS..(o * slot.c_in + i + 1) * TAPS];
                    let chan = &pin[i * h * w..(i + 1) * h * w];
                    for t in 0..nt {
                        let out_row = &mut out[t * ns..(t + 1) * ns];
                        for kt in 0..KERNEL {
                            let in_row = &chan[(t + kt) * w..(t + kt + 1) * w];
                            for ks in 0..KERNEL {
                                let k = kernel[kt * KERNEL + ks];
                                for (dst, src) in out_row.iter_mut().zip(&in_row[ks..ks + ns]) {
                                    *dst += k * src;
                                }
                            }
                        }
                    }
                }
            }
            act = if l < last {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                Vec::new()
            };
            padded.push(pin);
            pre.push(z);
        }
        let features = &pre[last];
        let nf = features.len();
        let dense = &self.params[layout.dense_weight..layout.dense_bias];
        let out = (0..ns)
            .map(|j| {
                let row = &dense[j * nf..(j + 1) * nf];
                self.params[layout.dense_bias + j] + row.iter().zip(features).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect();
        Ok((
            out,
            ForwardCache {
                padded,
                pre,
                n_params: self.params.len(),
            },
        ))
    }

    pub fn predict(&self, obs: &ObservationSet) -> Result<Vec<f64>> {
        Ok(self.forward(&self.norm.input(obs))?.0)
    }

    /// Parameter gradient of a scalar loss whose gradient with respect to the output is `grad_out`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &[f64]) -> Result<Vec<f64>> {
        let (nt, ns) = (self.arch.n_times, self.arch.n_space);
        check_len(ns, grad_out.len())?;
        check_len(self.params.len(), cache.n_params)?;
        let layout = self.arch.layout();
        check_len(layout.conv.len(), cache.pre.len())?;
        let (h, w) = (nt + 2, ns + 2);
        let px = nt * ns;
        let mut grads = vec![0.0; self.params.len()];

        let features = cache.features();
        let nf = features.len();
        let dense = &self.params[layout.dense_weight..layout.dense_bias];
        let mut g_z = vec![0.0; nf];
        for (j, &g) in grad_out.iter().enumerate() {
            grads[layout.dense_bias + j] = g;
            if g == 0.0 {
                continue;
            }
            let gw = &mut grads[layout.dense_weight + j * nf..layout.dense_weight + (j + 1) * nf];
            for (dst, f) in gw.iter_mut().zip(features) {
                *dst = g * f;
            }
            for (dst, wt) in g_z.iter_mut().zip(&dense[j * nf..(j + 1) * nf]) {
                *dst += g * wt;
            }
        }

        for (l, slot) in layout.conv.iter().enumerate().rev() {
            let pin = &cache.padded[l];
            let weights = &self.params[slot.weight..slot.bias];
            let mut g_pin = if l > 0 { vec![0.0; slot.c_in * h * w] } else { Vec::new() };
            for o in 0..slot.c_out {
                let g_out = &g_z[o * px..(o + 1) * px];
                grads[slot.bias + o] = g_out.iter().sum();
                for i in 0..slot.c_in {
                    let base = slot.weight + (o * slot.c_in + i) * TAPS;
                    let chan = &pin[i * h * w..(i + 1) * h * w];
                    for kt in 0..KERNEL {
                        for ks in 0..KERNEL {
                            let mut acc = 0.0;
                            for t in 0..nt {
                                let in_row = &chan[(t + kt) * w + ks..(t + kt) * w + ks + ns];
                                let g_row = &g_out[t * ns..(t + 1) * ns];
                                acc += in_row.iter().zip(g_row).map(|(a, b)| a * b).sum::<f64>();
                            }
                            grads[base + kt * KERNEL + ks] = acc;
                        }
                    }
                    if l == 0 {
                        continue;
                    }
                    let kernel = &weights[(o * slot.c_in + i) * TAPS..(o * slot.c_in + i + 1) * TAPS];
                    let g_chan = &mut g_pin[i * h * w..(i + 1) * h * w];
                    for t in 0..nt {
                        let g_row = &g_out[t * ns..(t + 1) * ns];
                        for kt in 0..KERNEL {
                            let dst_row = &mut g_chan[(t + kt) * w..(t + kt + 1) * w];
                            for ks in 0..KERNEL {
                                let k = kernel[kt * KERNEL + ks];
                                for (dst, g) in dst_row[ks..ks + ns].iter_mut().zip(g_row) {
                                    *dst += k * g;
                                }
                            }
                        }
                    }
                }
            }
            if l > 0 {
                let g_act = unpad_grad(&g_pin, slot.c_in, nt, ns);
                g_z = g_act
                    .iter()
                    .zip(&cache.pre[l - 1])
                    .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 })
                    .collect();
            }
        }
        Ok(grads)
    }

    /// Mutable view of the biases of conv layer `layer`.
    pub fn conv_bias_mut(&mut self, layer: usize) -> &mut [f64] {
        let slot = self.arch.layout().conv[layer];
        &mut self.params[slot.bias..slot.bias + slot.c_out]
    }

    pub fn conv_weight(&self, layer: usize) -> &[f64] {
        let slot = self.arch.layout().conv[layer];
        &self.params[slot.weight..slot.bias]
    }

    pub fn dense_weight(&self) -> &[f64] {
        let layout = self.arch.layout();
        &self.params[layout.dense_weight..layout.dense_bias]
    }

    pub fn dense_bias(&self) -> &[f64] {
        let layout = self.arch.layout();
        &self.params[layout.dense_bias..layout.end]
    }

    pub fn dense_bias_mut(&mut self) -> &mut [f64] {
        let layout = self.arch.layout();
        &mut self.params[layout.dense_bias..layout.end]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::StandardNormal;

    fn tiny() -> Architecture {
        Architecture::new(4, 6, vec![2, 2, 2, 2, 2]).unwrap()
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, 3);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    fn probe_loss(out: &[f64], c: &[f64]) -> f64 {
        out.iter().zip(c).map(|(a, b)| a * b + 0.5 * a * a).sum()
    }

    fn probe_grad(out: &[f64], c: &[f64]) -> Vec<f64> {
        out.iter().zip(c).map(|(a, b)| b + a).collect()
    }

    #[test]
    fn zero_network_outputs_zero() {
        for (nt, ns) in [(4, 6), (11, 40), (3, 9)] {
            let net = ConvNet::zeros(Architecture::standard(nt, ns), Normalization::default()).unwrap();
            let (out, _) = net.forward(&random(2 * nt * ns, 1)).unwrap();
            assert_eq!(out, vec![0.0; ns]);
        }
    }

    #[test]
    fn output_shape_and_input_check() {
        let net = ConvNet::init(Architecture::standard(11, 40), Normalization::default(), 3).unwrap();
        assert_eq!(net.forward(&random(880, 2)).unwrap().0.len(), 40);
        assert!(matches!(net.forward(&random(879, 2)), Err(Error::DimensionMismatch { .. })));
        let expected = 2 * 32 * 9 + 32 + 3 * (32 * 32 * 9 + 32) + 32 * 4 * 9 + 4 + 40 * 4 * 440 + 40;
        assert_eq!(net.n_params(), expected);
    }

    #[test]
    fn conv_stack_is_shift_equivariant_in_space() {
        let arch = Architecture::new(5, 8, vec![3, 3, 3, 3, 2]).unwrap();
        let net = ConvNet::init(arch.clone(), Normalization::default(), 4).unwrap();
        let input = random(2 * 5 * 8, 5);
        let rotate_maps = |maps: &[f64], k: usize| -> Vec<f64> {
            maps.chunks(8).flat_map(|row| crate::dynamics::rotate(row, k)).collect()
        };
        let (_, base) = net.forward(&input).unwrap();
        for k in 1..8 {
            let (_, shifted) = net.forward(&rotate_maps(&input, k)).unwrap();
            for l in 0..5 {
                let expect = rotate_maps(base.pre_activation(l), k);
                for (a, b) in shifted.pre_activation(l).iter().zip(&expect) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dead_relus_give_dense_bias() {
        let arch = Architecture::new(4, 6, vec![3, 3, 3, 3, 2]).unwrap();
        let mut net = ConvNet::init(arch, Normalization::default(), 6).unwrap();
        for l in 0..4 {
            net.conv_bias_mut(l).fill(-1e3);
        }
        net.dense_bias_mut().copy_from_slice(&[0.5, -1.0, 2.0, 0.0, 3.0, 1.5]);
        let (out, cache) = net.forward(&random(48, 7)).unwrap();
        for l in 0..4 {
            assert!(cache.pre_activation(l).iter().all(|&z| z < 0.0));
        }
        assert_eq!(out, net.dense_bias());
    }

    #[test]
    fn backward_of_zero_is_zero_and_linear() {
        let net = ConvNet::init(tiny(), Normalization::default(), 8).unwrap();
        let (_, cache) = net.forward(&random(48, 9)).unwrap();
        assert!(net.backward(&cache, &[0.0; 6]).unwrap().iter().all(|&g| g == 0.0));
        let g = random(6, 10);
        let g2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let a = net.backward(&cache, &g).unwrap();
        let b = net.backward(&cache, &g2).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn backward_matches_finite_differences_per_parameter() {
        let mut net = ConvNet::init(tiny(), Normalization::default(), 11).unwrap();
        // small positive biases keep most units active, so kinks are rare
        for l in 0..4 {
            net.conv_bias_mut(l).fill(0.3);
        }
        let input = random(48, 12);
        let c = random(6, 13);
        let (out, cache) = net.forward(&input).unwrap();
        let grads = net.backward(&cache, &probe_grad(&out, &c)).unwrap();
        let h = 1e-4;
        let mut checked = 0;
        for p in 0..net.n_params() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            plus.params[p] += h;
            minus.params[p] -= h;
            let fp = probe_loss(&plus.forward(&input).unwrap().0, &c);
            let fm = probe_loss(&minus.forward(&input).unwrap().0, &c);
            let fd = (fp - fm) / (2.0 * h);
            let scale = fd.abs().max(grads[p].abs());
            if scale < 1e-8 {
                assert!((fd - grads[p]).abs() < 1e-8, "param {p}: fd {fd} vs {}", grads[p]);
                continue;
            }
            let rel = (fd - grads[p]).abs() / scale;
            assert!(rel < 1e-5, "param {p}: fd {fd} vs analytic {} (rel {rel})", grads[p]);
            checked += 1;
        }
        assert!(checked > net.n_params() / 2);
    }

    #[test]
    fn directional_derivative_matches() {
        let net = ConvNet::init(Architecture::new(5, 8, vec![4, 4, 4, 4, 2]).unwrap(), Normalization::default(), 14).unwrap();
        let input = random(80, 15);
        let c = random(8, 16);
        let (out, cache) = net.forward(&input).unwrap();
        let grads = net.backward(&cache, &probe_grad(&out, &c)).unwrap();
        for seed in 0..5 {
            let u = random(net.n_params(), 100 + seed);
            let h = 1e-5;
            let shifted = |sign: f64| {
                let mut n = net.clone();
                for (p, d) in n.params.iter_mut().zip(&u) {
                    *p += sign * h * d;
                }
                probe_loss(&n.forward(&input).unwrap().0, &c)
            };
            let fd = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
            let an: f64 = grads.iter().zip(&u).map(|(a, b)| a * b).sum();
            assert!((fd - an).abs() / an.abs() < 1e-5, "fd {fd} analytic {an}");
        }
    }

    #[test]
    fn init_is_deterministic_he_uniform() {
        let arch = Architecture::standard(11, 40);
        let a = ConvNet::init(arch.clone(), Normalization::default(), 21).unwrap();
        let b = ConvNet::init(arch.clone(), Normalization::default(), 21).unwrap();
        assert_eq!(a, b);
        let c = ConvNet::init(arch, Normalization::default(), 22).unwrap();
        assert_ne!(a.params, c.params);
        for l in 0..5 {
            let slot = a.arch.layout().conv[l];
            assert!(a.params[slot.bias..slot.bias + slot.c_out].iter().all(|&v| v == 0.0));
        }
        assert!(a.dense_bias().iter().all(|&v| v == 0.0));
        // middle conv layers have 32*32*9 = 9216 weights each; pool three of them
        let pooled: Vec<f64> = (1..4).flat_map(|l| a.conv_weight(l).to_vec()).collect();
        let var = pooled.iter().map(|v| v * v).sum::<f64>() / pooled.len() as f64;
        let expected = 2.0 / (32.0 * 9.0);
        assert!((var / expected - 1.0).abs() < 0.1, "variance {var} vs {expected}");
        let dense = a.dense_weight();
        let var = dense.iter().map(|v| v * v).sum::<f64>() / dense.len() as f64;
        assert!((var / (2.0 / 1760.0) - 1.0).abs() < 0.1);
    }
}
