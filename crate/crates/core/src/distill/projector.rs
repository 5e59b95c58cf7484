use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{argument_error, Result};
use crate::masks::GuidanceFeatureMap;

/// Fully connected layer, `y = x W + b` with `W` stored `in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }
}

/// MLP mapping guidance features down to the per-Gaussian feature width,
/// with a rectifier between consecutive layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    layers: Vec<Dense>,
}

pub struct ForwardCache {
    /// Input to every layer, followed by the final output.
    activations: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds at least the input")
    }
}

pub type LayerGrads = Vec<(Array2<f64>, Array1<f64>)>;

impl Projector {
    /// One hidden layer of width `hidden`; He-uniform weights, zero biases.
    pub fn new(input_dim: usize, hidden: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |i: usize, o: usize| {
            let bound = (6.0 / i as f64).sqrt();
            Dense {
                weight: Array2::from_shape_fn((i, o), |_| rng.random_range(-bound..=bound)),
                bias: Array1::zeros(o),
            }
        };
        let first = layer(input_dim, hidden);
        let second = layer(hidden, output_dim);
        Projector {
            layers: vec![first, second],
        }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(argument_error!("projector needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(argument_error!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                ));
            }
        }
        if layers.iter().any(|l| l.bias.len() != l.output_dim()) {
            return Err(argument_error!("bias length differs from layer width"));
        }
        if layers
            .iter()
            .any(|l| l.weight.iter().chain(l.bias.iter()).any(|v| !v.is_finite()))
        {
            return Err(argument_error!("non-finite projector weight"));
        }
        Ok(Projector { layers })
    }

    /// Single linear layer passing its input through unchanged.
    pub fn identity(dim: usize) -> Self {
        Projector {
            layers: vec![Dense {
                weight: Array2::eye(dim),
                bias: Array1::zeros(dim),
            }],
        }
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output_dim()
    }

    pub fn forward(&self, input: ArrayView2<f64>) -> ForwardCache {
        let mut activations = vec![input.to_owned()];
        for (k, layer) in self.layers.iter().enumerate() {
            let mut y = activations[k].dot(&layer.weight) + &layer.bias;
            if k + 1 < self.layers.len() {
                y.mapv_inplace(|v| v.max(0.0));
            }
            activations.push(y);
        }
        ForwardCache { activations }
    }

    /// Parameter gradients given the loss gradient on the output.
    pub fn backward(&self, cache: &ForwardCache, d_output: Array2<f64>) -> LayerGrads {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = d_output;
        for k in (0..self.layers.len()).rev() {
            let input = &cache.activations[k];
            grads.push((input.t().dot(&delta), delta.sum_axis(Axis(0))));
            if k > 0 {
                let mut d_in = delta.dot(&self.layers[k].weight.t());
                // rectifier derivative, read off the post-activation input
                ndarray::Zip::from(&mut d_in)
                    .and(input)
                    .for_each(|d, &a| {
                        if a <= 0.0 {
                            *d = 0.0
                        }
                    });
                delta = d_in;
            }
        }
        grads.reverse();
        grads
    }
}

/// Projected guidance features on the guidance grid, `Hf x Wf x C`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureGrid {
    pub fn cell(&self, c: usize) -> &[f64] {
        &self.data[c * self.dim..(c + 1) * self.dim]
    }

    pub fn cell_count(&self) -> usize {
        self.width * self.height
    }
}

pub(crate) fn guidance_matrix(gfm: &GuidanceFeatureMap) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((gfm.cell_count(), gfm.dim), &gfm.data).expect("guidance payload shape")
}

/// Applies the projector independently to every grid cell.
pub fn project_guidance(gfm: &GuidanceFeatureMap, projector: &Projector) -> Result<FeatureGrid> {
    if gfm.dim != projector.input_dim() {
        return Err(argument_error!(
            "guidance features have {} channels, projector expects {}",
            gfm.dim,
            projector.input_dim()
        ));
    }
    let out = projector.forward(guidance_matrix(gfm));
    Ok(FeatureGrid {
        width: gfm.grid_width,
        height: gfm.grid_height,
        dim: projector.output_dim(),
        data: out.output().iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gfm(dim: usize, cells: usize, seed: u64) -> GuidanceFeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GuidanceFeatureMap {
            view_id: "v".into(),
            grid_width: cells,
            grid_height: 1,
            dim,
            data: (0..cells * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
            image_width: cells,
            image_height: 1,
        }
    }

    #[test]
    fn zero_projector_outputs_zero() {
        let p = Projector::from_layers(vec![
            Dense {
                weight: Array2::zeros((5, 7)),
                bias: Array1::zeros(7),
            },
            Dense {
                weight: Array2::zeros((7, 3)),
                bias: Array1::zeros(3),
            },
        ])
        .unwrap();
        let out = project_guidance(&gfm(5, 4, 1), &p).unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
        assert_eq!(out.dim, 3);
    }

    #[test]
    fn identity_passes_input_through() {
        let g = gfm(6, 3, 2);
        let out = project_guidance(&g, &Projector::identity(6)).unwrap();
        assert_eq!(out.data, g.data);
    }

    #[test]
    fn matches_dense_algebra_oracle() {
        let g = gfm(5, 6, 3);
        let p = Projector::new(5, 8, 3, 4);
        let out = project_guidance(&g, &p).unwrap();
        let (l1, l2) = (&p.layers()[0], &p.layers()[1]);
        for c in 0..6 {
            let x = g.cell(c);
            let hidden: Vec<f64> = (0..8)
                .map(|j| {
                    let s: f64 = (0..5).map(|i| x[i] * l1.weight[(i, j)]).sum::<f64>() + l1.bias[j];
                    s.max(0.0)
                })
                .collect();
            for o in 0..3 {
                let y: f64 = (0..8).map(|j| hidden[j] * l2.weight[(j, o)]).sum::<f64>() + l2.bias[o];
                assert!((out.cell(c)[o] - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        assert!(project_guidance(&gfm(4, 2, 0), &Projector::identity(3)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let g = gfm(4, 5, 7);
        let mut p = Projector::new(4, 6, 3, 8);
        let x = guidance_matrix(&g).to_owned();
        // loss = sum(out * r) for fixed r
        let r = Array2::from_shape_fn((5, 3), |(i, j)| (i as f64 - j as f64) * 0.3 + 0.1);
        let loss = |p: &Projector| (p.forward(x.view()).output() * &r).sum();
        let grads = p.backward(&p.forward(x.view()), r.clone());
        let h = 1e-6;
        for k in 0..2 {
            for idx in [(0usize, 0usize), (1, 2), (3, 1)] {
                let (i, j) = (idx.0 % p.layers()[k].weight.nrows(), idx.1 % p.layers()[k].weight.ncols());
                let orig = p.layers()[k].weight[(i, j)];
                p.layers_mut()[k].weight[(i, j)] = orig + h;
                let up = loss(&p);
                p.layers_mut()[k].weight[(i, j)] = orig - h;
                let down = loss(&p);
                p.layers_mut()[k].weight[(i, j)] = orig;
                let fd = (up - down) / (2.0 * h);
                assert!((fd - grads[k].0[(i, j)]).abs() < 1e-6 * (1.0 + fd.abs()));
            }
        }
    }
}
