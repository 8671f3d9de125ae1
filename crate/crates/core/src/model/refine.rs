//! Time-conditioned refinement network.
//!
//! A small MLP that maps positionally-encoded copies of a rigged surfel's
//! world attributes plus the normalized timestamp to additive offsets
//! (position, rotation, log-scales). The encoded inputs carry a
//! stop-gradient: gradients flow into the network weights and out through
//! the offsets, never back into the attributes via the encoding.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geom::{posenc_into, posenc_len, Vec3};
use crate::model::Surfel2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Number of weight layers (input->hidden, hidden layers, hidden->out).
    pub depth: usize,
    pub hidden: usize,
    /// Positional-encoding frequency counts for position, rotation,
    /// log-scales and time.
    pub l_x: usize,
    pub l_r: usize,
    pub l_s: usize,
    pub l_j: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        // Desk-scale default; the full-size variant is 8 layers x 256.
        NetConfig { depth: 4, hidden: 64, l_x: 8, l_r: 4, l_s: 4, l_j: 4 }
    }
}

impl NetConfig {
    pub fn input_len(&self) -> usize {
        posenc_len(3, self.l_x) + posenc_len(4, self.l_r) + posenc_len(2, self.l_s) + posenc_len(1, self.l_j)
    }

    pub const OUTPUT_LEN: usize = 9; // 3 position + 4 rotation + 2 log-scale

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        assert!(self.depth >= 2);
        let mut dims = Vec::with_capacity(self.depth);
        dims.push((self.input_len(), self.hidden));
        for _ in 0..self.depth - 2 {
            dims.push((self.hidden, self.hidden));
        }
        dims.push((self.hidden, Self::OUTPUT_LEN));
        dims
    }

    pub fn weight_len(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Offsets produced by the network for one surfel.
#[derive(Clone, Copy, Debug, Default)]
pub struct RefineOffsets {
    pub pos: Vec3,
    pub rot: [f64; 4],
    pub log_scales: [f64; 2],
}

/// Forward activations kept for the weight backward pass.
#[derive(Clone, Debug)]
pub struct RefineCacheEntry {
    input: Vec<f64>,
    /// Post-ReLU activations of each hidden layer.
    hidden: Vec<Vec<f64>>,
}

/// MLP with ReLU hidden activations and a zero-initialized output layer,
/// so offsets start at exactly zero.
#[derive(Clone, Debug)]
pub struct RefinementNet {
    pub cfg: NetConfig,
    /// Per layer: row-major weight matrix (out x in), then biases (out).
    pub weights: Vec<f64>,
}

impl RefinementNet {
    pub fn new(cfg: NetConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut weights = vec![0.0; cfg.weight_len()];
        let dims = cfg.layer_dims();
        let mut off = 0;
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let last = li == dims.len() - 1;
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for w in weights[off..off + fan_in * fan_out].iter_mut() {
                // Output layer stays zero: offsets vanish at start.
                *w = if last { 0.0 } else { (rng.random::<f64>() * 2.0 - 1.0) * bound };
            }
            off += fan_in * fan_out + fan_out;
        }
        RefinementNet { cfg, weights }
    }

    fn encode(&self, world: &Surfel2D, t_norm: f64) -> Vec<f64> {
        let cfg = &self.cfg;
        let mut input = Vec::with_capacity(cfg.input_len());
        posenc_into(&[world.pos.x, world.pos.y, world.pos.z], cfg.l_x, &mut input);
        posenc_into(&[world.rot.w, world.rot.x, world.rot.y, world.rot.z], cfg.l_r, &mut input);
        posenc_into(&world.log_scales, cfg.l_s, &mut input);
        posenc_into(&[t_norm], cfg.l_j, &mut input);
        input
    }

    fn forward_from(&self, input: Vec<f64>) -> ([f64; 9], RefineCacheEntry) {
        let dims = self.cfg.layer_dims();
        let mut hidden = Vec::with_capacity(dims.len() - 1);
        let mut act = input.clone();
        let mut off = 0;
        let mut out = [0.0; 9];
        for (li, &(fan_in, fan_out)) in dims.iter().enumerate() {
            let w = &self.weights[off..off + fan_in * fan_out];
            let b = &self.weights[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            off += fan_in * fan_out + fan_out;
            let mut next = vec![0.0; fan_out];
            for o in 0..fan_out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut acc = b[o];
                for (wi, ai) in row.iter().zip(&act) {
                    acc += wi * ai;
                }
                next[o] = acc;
            }
            if li + 1 == dims.len() {
                out.copy_from_slice(&next);
            } else {
                for v in next.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                hidden.push(next.clone());
                act = next;
            }
        }
        (out, RefineCacheEntry { input, hidden })
    }

    /// Offsets for a rigged world surfel at normalized time `t_norm`.
    pub fn offsets(&self, world: &Surfel2D, t_norm: f64) -> RefineOffsets {
        self.offsets_cached(world, t_norm).0
    }

    pub fn offsets_cached(&self, world: &Surfel2D, t_norm: f64) -> (RefineOffsets, RefineCacheEntry) {
        let (out, cache) = self.forward_from(self.encode(world, t_norm));
        (
            RefineOffsets {
                pos: Vec3::new(out[0], out[1], out[2]),
                rot: [out[3], out[4], out[5], out[6]],
                log_scales: [out[7], out[8]],
            },
            cache,
        )
    }

    /// Accumulates dL/dweights for one surfel given dL/d(offsets).
    /// No input gradient exists: encoded inputs are stop-gradients.
    pub fn backward(&self, cache: &RefineCacheEntry, upstream: &[f64; 9], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.weights.len());
        let dims = self.cfg.layer_dims();
        // delta starts as upstream on the (linear) output layer.
        let mut delta: Vec<f64> = upstream.to_vec();
        let mut offsets = Vec::with_capacity(dims.len());
        let mut off = 0;
        for &(fan_in, fan_out) in &dims {
            offsets.push(off);
            off += fan_in * fan_out + fan_out;
        }
        for li in (0..dims.len()).rev() {
            let (fan_in, fan_out) = dims[li];
            let woff = offsets[li];
            let act: &[f64] = if li == 0 { &cache.input } else { &cache.hidden[li - 1] };
            // Weight and bias gradients.
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &mut grad[woff + o * fan_in..woff + (o + 1) * fan_in];
                    for (g, a) in row.iter_mut().zip(act) {
                        *g += d * a;
                    }
                }
                grad[woff + fan_in * fan_out + o] += d;
            }
            if li == 0 {
                break;
            }
            // Propagate through the layer and the ReLU of the layer below.
            let w = &self.weights[woff..woff + fan_in * fan_out];
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let d = delta[o];
                if d != 0.0 {
                    let row = &w[o * fan_in..(o + 1) * fan_in];
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += d * wi;
                    }
                }
            }
            let below = &cache.hidden[li - 1];
            for (p, &a) in prev.iter_mut().zip(below) {
                if a <= 0.0 {
                    *p = 0.0;
                }
            }
            delta = prev;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::Quat;
    use crate::synth::fd_gradient;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn probe_surfel() -> Surfel2D {
        Surfel2D::flat(
            Vec3::new(0.03, -0.02, 0.11),
            Quat::new(0.9, 0.1, -0.2, 0.05),
            [0.004, 0.006],
            0.4,
            [0.6, 0.3, 0.2],
        )
    }

    #[test]
    fn zero_initialized_net_outputs_zero_offsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = RefinementNet::new(NetConfig::default(), &mut rng);
        let o = net.offsets(&probe_surfel(), 0.3);
        assert_eq!(o.pos, Vec3::zeros());
        assert_eq!(o.rot, [0.0; 4]);
        assert_eq!(o.log_scales, [0.0; 2]);
    }

    #[test]
    fn trained_net_depends_on_time() {
        // Fit offsets to a time-varying target with plain gradient descent
        // on this module's own backward pass.
        let cfg = NetConfig { depth: 3, hidden: 16, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = RefinementNet::new(cfg, &mut rng);
        let s = probe_surfel();
        let times = [0.0, 0.5, 1.0];
        let target = |t: f64| Vec3::new((std::f64::consts::PI * t).sin() * 0.02, 0.0, 0.0);
        for _ in 0..400 {
            let mut grad = vec![0.0; net.weights.len()];
            for &t in &times {
                let (o, cache) = net.offsets_cached(&s, t);
                let diff = o.pos - target(t);
                let mut up = [0.0; 9];
                up[0] = 2.0 * diff.x;
                up[1] = 2.0 * diff.y;
                up[2] = 2.0 * diff.z;
                net.backward(&cache, &up, &mut grad);
            }
            for (w, g) in net.weights.iter_mut().zip(&grad) {
                *w -= 0.02 * g;
            }
        }
        let a = net.offsets(&s, 0.0);
        let b = net.offsets(&s, 0.5);
        assert!((a.pos - b.pos).norm() > 1e-4, "offsets must differ across time");
        assert!((b.pos - target(0.5)).norm() < 5e-3, "training should fit the bulge");
    }

    #[test]
    fn weight_gradients_match_finite_differences() {
        let cfg = NetConfig { depth: 3, hidden: 8, l_x: 2, l_r: 2, l_s: 2, l_j: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = RefinementNet::new(cfg, &mut rng);
        // Give the zero output layer nonzero values so gradients flow.
        let n = net.weights.len();
        for (i, w) in net.weights.iter_mut().enumerate().skip(n - 9 * 8 - 9) {
            *w += 0.01 * ((i % 7) as f64 - 3.0);
        }
        let s = probe_surfel();
        let probe: Vec<f64> = (0..9).map(|i| 0.1 * (i as f64 + 1.0)).collect();

        let loss = |weights: &[f64]| {
            let net = RefinementNet { cfg, weights: weights.to_vec() };
            let (o, _) = net.offsets_cached(&s, 0.7);
            let flat = [
                o.pos.x,
                o.pos.y,
                o.pos.z,
                o.rot[0],
                o.rot[1],
                o.rot[2],
                o.rot[3],
                o.log_scales[0],
                o.log_scales[1],
            ];
            flat.iter().zip(&probe).map(|(a, b)| a * b).sum::<f64>()
        };

        let mut analytic = vec![0.0; net.weights.len()];
        let (_, cache) = net.offsets_cached(&s, 0.7);
        let mut up = [0.0; 9];
        up.copy_from_slice(&probe);
        net.backward(&cache, &up, &mut analytic);

        let fd = fd_gradient(&loss, &net.weights, 1e-5).unwrap();
        for (a, f) in analytic.iter().zip(&fd) {
            let denom = a.abs().max(f.abs()).max(1e-6);
            assert!(
                (a - f).abs() / denom < 1e-4,
                "weight grad mismatch: analytic {a} vs fd {f}"
            );
        }
    }

    #[test]
    fn weight_vector_layout_is_stable() {
        let cfg = NetConfig::default();
        assert_eq!(
            cfg.input_len(),
            2 * 8 * 3 + 2 * 4 * 4 + 2 * 4 * 2 + 2 * 4
        );
        let dims_total = cfg.input_len() * 64 + 64 + (64 * 64 + 64) * 2 + 64 * 9 + 9;
        assert_eq!(cfg.weight_len(), dims_total);
    }
}
