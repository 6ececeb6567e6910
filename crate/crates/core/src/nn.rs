//! Dense tanh networks with hand-written reverse mode, including reverse mode
//! through a forward-mode input tangent.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in × out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let a = (6.0 / (inputs + outputs) as f64).sqrt();
        Self {
            w: Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-a..a)),
            b: Array1::zeros(outputs),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: Array2::zeros((inputs, outputs)),
            b: Array1::zeros(outputs),
        }
    }
}

/// Hidden layers use tanh, the last layer is linear.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Activations of a batch pass.
#[derive(Debug, Clone)]
pub struct Trace {
    /// `h[0]` is the input, `h[l+1]` the output of layer `l`.
    pub h: Vec<Array2<f64>>,
    /// Input tangent and its images, aligned with `h`.
    pub dh: Option<Vec<Array2<f64>>>,
    /// Pre-activation tangents per layer.
    pub da: Option<Vec<Array2<f64>>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.h.last().expect("non-empty")
    }

    pub fn tangent(&self) -> Option<&Array2<f64>> {
        self.dh.as_ref().map(|d| d.last().expect("non-empty"))
    }
}

impl Mlp {
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "need input and output sizes");
        Self {
            layers: sizes.windows(2).map(|w| Dense::glorot(w[0], w[1], rng)).collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].w.nrows()];
        s.extend(self.layers.iter().map(|l| l.w.ncols()));
        s
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].w.nrows()
    }

    fn is_hidden(&self, l: usize) -> bool {
        l + 1 < self.layers.len()
    }

    /// Batch forward pass; with `dx`, also pushes the tangent `dx` through.
    pub fn forward(&self, x: &Array2<f64>, dx: Option<&Array2<f64>>) -> Trace {
        let mut h = vec![x.clone()];
        let mut dh = dx.map(|d| vec![d.clone()]);
        let mut das = dx.map(|_| Vec::new());
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = h[l].dot(&layer.w) + &layer.b;
            let da = dh.as_ref().map(|d| d[l].dot(&layer.w));
            let mut dout = da.clone();
            if self.is_hidden(l) {
                a.mapv_inplace(f64::tanh);
                if let Some(d) = dout.as_mut() {
                    ndarray::Zip::from(d).and(&a).for_each(|d, &t| *d *= 1.0 - t * t);
                }
            }
            h.push(a);
            if let (Some(d), Some(dout), Some(das), Some(da)) = (dh.as_mut(), dout, das.as_mut(), da) {
                d.push(dout);
                das.push(da);
            }
        }
        Trace { h, dh, da: das }
    }

    /// Gradients of a scalar loss given `∂L/∂output` and, for a tangent pass,
    /// `∂L/∂(output tangent)`. Returns per-layer gradients and `∂L/∂input`.
    pub fn backward(
        &self,
        trace: &Trace,
        g_out: &Array2<f64>,
        g_tangent: Option<&Array2<f64>>,
    ) -> (Vec<Dense>, Array2<f64>) {
        let mut grads: Vec<Dense> = self.layers.iter().map(|l| Dense::zeros(l.w.nrows(), l.w.ncols())).collect();
        let mut gh = g_out.clone();
        let mut gdh = g_tangent.cloned();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let out = &trace.h[l + 1];
            let (ga, gda) = if self.is_hidden(l) {
                let s = out.mapv(|t| 1.0 - t * t);
                match (&gdh, &trace.da) {
                    (Some(gd), Some(da)) => {
                        let gda = gd * &s;
                        let gs = gd * &da[l];
                        let gh_total = &gh - &(2.0 * &gs * out);
                        (gh_total * &s, Some(gda))
                    }
                    _ => (&gh * &s, None),
                }
            } else {
                (gh.clone(), gdh.clone())
            };
            grads[l].w = trace.h[l].t().dot(&ga);
            grads[l].b = ga.sum_axis(Axis(0));
            gh = ga.dot(&layer.w.t());
            if let (Some(gda), Some(dh)) = (&gda, &trace.dh) {
                grads[l].w += &dh[l].t().dot(gda);
                gdh = Some(gda.dot(&layer.w.t()));
            } else {
                gdh = None;
            }
        }
        (grads, gh)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    fn locate(&self, mut k: usize) -> (usize, Option<(usize, usize)>, usize) {
        for (l, layer) in self.layers.iter().enumerate() {
            if k < layer.w.len() {
                let c = layer.w.ncols();
                return (l, Some((k / c, k % c)), 0);
            }
            k -= layer.w.len();
            if k < layer.b.len() {
                return (l, None, k);
            }
            k -= layer.b.len();
        }
        panic!("parameter index out of range");
    }

    /// Flat parameter access: per layer, weights row-major then biases.
    pub fn param(&self, k: usize) -> f64 {
        match self.locate(k) {
            (l, Some(ij), _) => self.layers[l].w[ij],
            (l, None, j) => self.layers[l].b[j],
        }
    }

    pub fn set_param(&mut self, k: usize, v: f64) {
        match self.locate(k) {
            (l, Some(ij), _) => self.layers[l].w[ij] = v,
            (l, None, j) => self.layers[l].b[j] = v,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

/// Reads the flat index `k` of a gradient list laid out like [`Mlp::param`].
pub fn grad_at(grads: &[Dense], mut k: usize) -> f64 {
    for g in grads {
        if k < g.w.len() {
            let c = g.w.ncols();
            return g.w[(k / c, k % c)];
        }
        k -= g.w.len();
        if k < g.b.len() {
            return g.b[k];
        }
        k -= g.b.len();
    }
    panic!("gradient index out of range");
}

/// First/second-moment adaptive step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<Dense>>,
    v: Vec<Vec<Dense>>,
}

impl Adam {
    /// Moments for each network in `nets`.
    pub fn new(lr: f64, nets: &[&Mlp]) -> Self {
        let zeros = |n: &Mlp| -> Vec<Dense> {
            n.layers.iter().map(|l| Dense::zeros(l.w.nrows(), l.w.ncols())).collect()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: nets.iter().map(|n| zeros(n)).collect(),
            v: nets.iter().map(|n| zeros(n)).collect(),
        }
    }

    /// One update of every network with its gradients.
    pub fn step(&mut self, nets: &mut [&mut Mlp], grads: &[Vec<Dense>]) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (lr, eps) = (self.lr, self.eps);
        for (k, net) in nets.iter_mut().enumerate() {
            for (l, layer) in net.layers.iter_mut().enumerate() {
                let (m, v, g) = (&mut self.m[k][l], &mut self.v[k][l], &grads[k][l]);
                let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                };
                ndarray::Zip::from(&mut layer.w)
                    .and(&mut m.w)
                    .and(&mut v.w)
                    .and(&g.w)
                    .for_each(|p, m, v, &g| update(p, m, v, g));
                ndarray::Zip::from(&mut layer.b)
                    .and(&mut m.b)
                    .and(&mut v.b)
                    .and(&g.b)
                    .for_each(|p, m, v, &g| update(p, m, v, g));
            }
        }
    }
}

/// Rows of `x` as a matrix.
pub fn to_matrix(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(net: &Mlp, x: &Array2<f64>, dx: &Array2<f64>) -> f64 {
        let t = net.forward(x, Some(dx));
        let y = t.output();
        let dy = t.tangent().unwrap();
        y.mapv(|v| v * v).sum() + 3.0 * dy.mapv(|v| v.powi(3)).sum()
    }

    #[test]
    fn tangent_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut net = Mlp::new(&[4, 6, 5, 2], &mut rng);
        let x = Array2::from_shape_fn((7, 4), |_| rng.random_range(-1.0..1.0));
        let mut dx = Array2::zeros((7, 4));
        dx.column_mut(2).fill(1.0);
        let t = net.forward(&x, Some(&dx));
        let g_out = 2.0 * t.output();
        let g_tan = 9.0 * t.tangent().unwrap().mapv(|v| v * v);
        let (grads, _) = net.backward(&t, &g_out, Some(&g_tan));
        for k in 0..net.n_params() {
            let p = net.param(k);
            let h = 1e-6;
            net.set_param(k, p + h);
            let up = loss(&net, &x, &dx);
            net.set_param(k, p - h);
            let dn = loss(&net, &x, &dx);
            net.set_param(k, p);
            let fd = (up - dn) / (2.0 * h);
            let an = grad_at(&grads, k);
            assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "param {k}: {an} vs {fd}");
        }
    }

    #[test]
    fn tangent_is_input_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::new(&[3, 8, 1], &mut rng);
        let x = Array2::from_shape_vec((1, 3), vec![0.3, -0.2, 0.7]).unwrap();
        let dx = Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 0.0]).unwrap();
        let d = net.forward(&x, Some(&dx)).tangent().unwrap()[(0, 0)];
        let h = 1e-5;
        let mut xp = x.clone();
        xp[(0, 1)] += h;
        let mut xm = x.clone();
        xm[(0, 1)] -= h;
        let fd = (net.forward(&xp, None).output()[(0, 0)] - net.forward(&xm, None).output()[(0, 0)]) / (2.0 * h);
        assert!((d - fd).abs() < 1e-8);
    }
}
