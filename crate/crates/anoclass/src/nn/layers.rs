//! Layers with explicit forward/backward. Batches are (N, C, H, W) or (N, F)
//! f64 arrays; each layer caches what its backward pass needs during a
//! training forward and accumulates parameter gradients on backward.

use ndarray::{Array2, Array4, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::Param;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// 3x3 convolution, stride 1, zero padding 1 (shape preserving).
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: Param, // (out, in, 3, 3) flattened
    pub bias: Param,   // (out,)
    pub in_ch: usize,
    pub out_ch: usize,
    cached_input: Option<Array4<f64>>,
}

fn im2col3x3(x: &ndarray::ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * 9, h * w));
    for ch in 0..c {
        for dy in 0..3usize {
            for dx in 0..3usize {
                let row = (ch * 3 + dy) * 3 + dx;
                let mut out_row = cols.row_mut(row);
                for y in 0..h {
                    let iy = y as isize + dy as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let ix = xx as isize + dx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out_row[y * w + xx] = x[(ch, iy as usize, ix as usize)];
                    }
                }
            }
        }
    }
    cols
}

fn col2im3x3(cols: &ArrayView2<f64>, c: usize, h: usize, w: usize) -> ndarray::Array3<f64> {
    let mut out = ndarray::Array3::<f64>::zeros((c, h, w));
    for ch in 0..c {
        for dy in 0..3usize {
            for dx in 0..3usize {
                let row = (ch * 3 + dy) * 3 + dx;
                let col_row = cols.row(row);
                for y in 0..h {
                    let iy = y as isize + dy as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let ix = xx as isize + dx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[(ch, iy as usize, ix as usize)] += col_row[y * w + xx];
                    }
                }
            }
        }
    }
    out
}

impl Conv3x3 {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (in_ch * 9) as f64;
        let dist = Normal::new(0.0, (2.0 / fan_in).sqrt()).unwrap();
        let weight: Vec<f64> = (0..out_ch * in_ch * 9).map(|_| dist.sample(rng)).collect();
        Conv3x3 {
            weight: Param::new(weight),
            bias: Param::zeros(out_ch),
            in_ch,
            out_ch,
            cached_input: None,
        }
    }

    fn weight_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.out_ch, self.in_ch * 9), &self.weight.data)
            .expect("conv weight shape")
    }

    fn apply(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.in_ch, "conv input channels");
        let w2 = self.weight_view();
        let mut out = Array4::<f64>::zeros((n, self.out_ch, h, w));
        for i in 0..n {
            let cols = im2col3x3(&x.index_axis(ndarray::Axis(0), i));
            let y = w2.dot(&cols); // (out, h*w)
            for o in 0..self.out_ch {
                let b = self.bias.data[o];
                for yy in 0..h {
                    for xx in 0..w {
                        out[(i, o, yy, xx)] = y[(o, yy * w + xx)] + b;
                    }
                }
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let out = self.apply(x);
        self.cached_input = Some(x.clone());
        out
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        self.apply(x)
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let x = self.cached_input.take().expect("forward_train not called");
        let (n, c, h, w) = x.dim();
        let w2 = ArrayView2::from_shape((self.out_ch, self.in_ch * 9), &self.weight.data)
            .expect("conv weight shape");

        let mut dw = Array2::<f64>::zeros((self.out_ch, self.in_ch * 9));
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        for i in 0..n {
            // grad wrt output as (out, h*w)
            let mut g = Array2::<f64>::zeros((self.out_ch, h * w));
            for o in 0..self.out_ch {
                for yy in 0..h {
                    for xx in 0..w {
                        g[(o, yy * w + xx)] = grad_out[(i, o, yy, xx)];
                    }
                }
            }
            let cols = im2col3x3(&x.index_axis(ndarray::Axis(0), i));
            dw = dw + g.dot(&cols.t());
            let dcols = w2.t().dot(&g); // (in*9, h*w)
            let dxi = col2im3x3(&dcols.view(), c, h, w);
            dx.index_axis_mut(ndarray::Axis(0), i).assign(&dxi);
            for o in 0..self.out_ch {
                let mut acc = 0.0;
                for v in g.row(o) {
                    acc += v;
                }
                self.bias.grad[o] += acc;
            }
        }
        for (gslot, gval) in self.weight.grad.iter_mut().zip(dw.iter()) {
            *gslot += gval;
        }
        dx
    }
}

/// Batch normalization over (N, H, W) per channel. Training mode uses batch
/// statistics and updates running estimates; eval mode uses the running ones.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    channels: usize,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Array4<f64>,
    centered: Array4<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::zeros(channels),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            channels,
            cache: None,
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let m = (n * h * w) as f64;
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        let mut x_hat = Array4::<f64>::zeros((n, c, h, w));
        let mut centered = Array4::<f64>::zeros((n, c, h, w));
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let mut mean = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        mean += x[(i, ch, y, xx)];
                    }
                }
            }
            mean /= m;
            let mut var = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let d = x[(i, ch, y, xx)] - mean;
                        var += d * d;
                    }
                }
            }
            var /= m;
            let istd = 1.0 / (var + BN_EPS).sqrt();
            inv_std[ch] = istd;
            let (g, b) = (self.gamma.data[ch], self.beta.data[ch]);
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let cent = x[(i, ch, y, xx)] - mean;
                        let xh = cent * istd;
                        centered[(i, ch, y, xx)] = cent;
                        x_hat[(i, ch, y, xx)] = xh;
                        out[(i, ch, y, xx)] = g * xh + b;
                    }
                }
            }
            self.running_mean[ch] = (1.0 - BN_MOMENTUM) * self.running_mean[ch] + BN_MOMENTUM * mean;
            let unbiased = if m > 1.0 { var * m / (m - 1.0) } else { var };
            self.running_var[ch] = (1.0 - BN_MOMENTUM) * self.running_var[ch] + BN_MOMENTUM * unbiased;
        }
        self.cache = Some(BnCache {
            x_hat,
            centered,
            inv_std,
        });
        out
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.channels);
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        for ch in 0..c {
            let istd = 1.0 / (self.running_var[ch] + BN_EPS).sqrt();
            let (g, b) = (self.gamma.data[ch], self.beta.data[ch]);
            let mean = self.running_mean[ch];
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        out[(i, ch, y, xx)] = g * (x[(i, ch, y, xx)] - mean) * istd + b;
                    }
                }
            }
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let cache = self.cache.take().expect("forward_train not called");
        let (n, c, h, w) = grad_out.dim();
        let m = (n * h * w) as f64;
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        for ch in 0..c {
            let g = self.gamma.data[ch];
            let istd = cache.inv_std[ch];
            let mut sum_dy = 0.0;
            let mut sum_dy_xhat = 0.0;
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let dy = grad_out[(i, ch, y, xx)];
                        sum_dy += dy;
                        sum_dy_xhat += dy * cache.x_hat[(i, ch, y, xx)];
                    }
                }
            }
            self.beta.grad[ch] += sum_dy;
            self.gamma.grad[ch] += sum_dy_xhat;
            // dX = (gamma * istd / m) * (m*dY - sum(dY) - x_hat * sum(dY*x_hat))
            for i in 0..n {
                for y in 0..h {
                    for xx in 0..w {
                        let dy = grad_out[(i, ch, y, xx)];
                        let xh = cache.x_hat[(i, ch, y, xx)];
                        dx[(i, ch, y, xx)] =
                            g * istd / m * (m * dy - sum_dy - xh * sum_dy_xhat);
                    }
                }
            }
        }
        let _ = cache.centered;
        dx
    }
}

/// 2x2 max pooling with stride 2 (floor mode). Inputs with a spatial side
/// smaller than 2 pass through unchanged so small demo grids stay usable.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2x2 {
    cache: Option<PoolCache>,
}

#[derive(Debug, Clone)]
enum PoolCache {
    Identity,
    Indices {
        in_dim: (usize, usize, usize, usize),
        argmax: Vec<(usize, usize)>,
    },
}

impl MaxPool2x2 {
    pub fn new() -> Self {
        MaxPool2x2 { cache: None }
    }

    fn pool(x: &Array4<f64>) -> (Array4<f64>, Vec<(usize, usize)>) {
        let (n, c, h, w) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array4::<f64>::zeros((n, c, ho, wo));
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for i in 0..n {
            for ch in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_pos = (oy * 2, ox * 2);
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let (yy, xx) = (oy * 2 + dy, ox * 2 + dx);
                                let v = x[(i, ch, yy, xx)];
                                if v > best {
                                    best = v;
                                    best_pos = (yy, xx);
                                }
                            }
                        }
                        out[(i, ch, oy, ox)] = best;
                        argmax.push(best_pos);
                    }
                }
            }
        }
        (out, argmax)
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let (_, _, h, w) = x.dim();
        if h < 2 || w < 2 {
            self.cache = Some(PoolCache::Identity);
            return x.clone();
        }
        let (out, argmax) = Self::pool(x);
        self.cache = Some(PoolCache::Indices {
            in_dim: x.dim(),
            argmax,
        });
        out
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let (_, _, h, w) = x.dim();
        if h < 2 || w < 2 {
            return x.clone();
        }
        Self::pool(x).0
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        match self.cache.take().expect("forward_train not called") {
            PoolCache::Identity => grad_out.clone(),
            PoolCache::Indices { in_dim, argmax } => {
                let (n, c, h, w) = in_dim;
                let (_, _, ho, wo) = grad_out.dim();
                let mut dx = Array4::<f64>::zeros((n, c, h, w));
                let mut k = 0;
                for i in 0..n {
                    for ch in 0..c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let (yy, xx) = argmax[k];
                                dx[(i, ch, yy, xx)] += grad_out[(i, ch, oy, ox)];
                                k += 1;
                            }
                        }
                    }
                }
                dx
            }
        }
    }
}

/// Mean over the spatial dimensions: (N, C, H, W) -> (N, C).
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    in_dim: Option<(usize, usize, usize, usize)>,
}

impl GlobalAvgPool {
    pub fn new() -> Self {
        GlobalAvgPool { in_dim: None }
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array2<f64> {
        self.in_dim = Some(x.dim());
        Self::apply(x)
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array2<f64> {
        Self::apply(x)
    }

    fn apply(x: &Array4<f64>) -> Array2<f64> {
        let (n, c, h, w) = x.dim();
        let mut out = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for ch in 0..c {
                let mut acc = 0.0;
                for y in 0..h {
                    for xx in 0..w {
                        acc += x[(i, ch, y, xx)];
                    }
                }
                out[(i, ch)] = acc / (h * w) as f64;
            }
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Array4<f64> {
        let (n, c, h, w) = self.in_dim.take().expect("forward_train not called");
        let mut dx = Array4::<f64>::zeros((n, c, h, w));
        let scale = 1.0 / (h * w) as f64;
        for i in 0..n {
            for ch in 0..c {
                let g = grad_out[(i, ch)] * scale;
                for y in 0..h {
                    for xx in 0..w {
                        dx[(i, ch, y, xx)] = g;
                    }
                }
            }
        }
        dx
    }
}

/// Fully connected layer: y = x W^T + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param, // (out, in) flattened
    pub bias: Param,
    pub in_dim: usize,
    pub out_dim: usize,
    cached_input: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let weight: Vec<f64> = (0..out_dim * in_dim)
            .map(|_| rng.random_range(-a..a))
            .collect();
        Linear {
            weight: Param::new(weight),
            bias: Param::zeros(out_dim),
            in_dim,
            out_dim,
            cached_input: None,
        }
    }

    fn weight_view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.out_dim, self.in_dim), &self.weight.data)
            .expect("linear weight shape")
    }

    fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.dot(&self.weight_view().t());
        for mut row in out.rows_mut() {
            for (o, v) in row.iter_mut().enumerate() {
                *v += self.bias.data[o];
            }
        }
        out
    }

    pub fn forward_train(&mut self, x: &Array2<f64>) -> Array2<f64> {
        let out = self.apply(x);
        self.cached_input = Some(x.clone());
        out
    }

    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        self.apply(x)
    }

    pub fn backward(&mut self, grad_out: &Array2<f64>) -> Array2<f64> {
        let x = self.cached_input.take().expect("forward_train not called");
        let dw = grad_out.t().dot(&x); // (out, in)
        for (slot, v) in self.weight.grad.iter_mut().zip(dw.iter()) {
            *slot += v;
        }
        for row in grad_out.rows() {
            for (o, v) in row.iter().enumerate() {
                self.bias.grad[o] += v;
            }
        }
        grad_out.dot(&self.weight_view())
    }
}

/// conv -> batch-norm -> ReLU -> 2x2 max-pool.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv3x3,
    pub bn: BatchNorm2d,
    pub pool: MaxPool2x2,
    relu_mask: Option<Array4<f64>>,
}

impl ConvBlock {
    pub fn new(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv: Conv3x3::new(in_ch, out_ch, rng),
            bn: BatchNorm2d::new(out_ch),
            pool: MaxPool2x2::new(),
            relu_mask: None,
        }
    }

    pub fn forward_train(&mut self, x: &Array4<f64>) -> Array4<f64> {
        let x = self.conv.forward_train(x);
        let mut x = self.bn.forward_train(&x);
        let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        x.zip_mut_with(&mask, |v, &m| *v *= m);
        self.relu_mask = Some(mask);
        self.pool.forward_train(&x)
    }

    pub fn forward_eval(&self, x: &Array4<f64>) -> Array4<f64> {
        let x = self.conv.forward_eval(x);
        let mut x = self.bn.forward_eval(&x);
        x.mapv_inplace(|v| v.max(0.0));
        self.pool.forward_eval(&x)
    }

    pub fn backward(&mut self, grad_out: &Array4<f64>) -> Array4<f64> {
        let mut g = self.pool.backward(grad_out);
        let mask = self.relu_mask.take().expect("forward_train not called");
        g.zip_mut_with(&mask, |v, &m| *v *= m);
        let g = self.bn.backward(&g);
        self.conv.backward(&g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.conv.weight,
            &mut self.conv.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    /// Central finite differences over every parameter and input of a
    /// loss(layer(x)) composition.
    fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
        let mut g = vec![0.0; x0.len()];
        let mut x = x0.to_vec();
        for i in 0..x0.len() {
            x[i] = x0[i] + h;
            let fp = f(&x);
            x[i] = x0[i] - h;
            let fm = f(&x);
            x[i] = x0[i];
            g[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64, what: &str) {
        for (i, (a, n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-6);
            let rel = (a - n).abs() / denom;
            assert!(rel < tol, "{what}[{i}]: analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut r = rng();
        let x0: Vec<f64> = (0..2 * 2 * 4 * 4).map(|_| r.random_range(-1.0..1.0)).collect();
        let make_x = |d: &[f64]| Array4::from_shape_vec((2, 2, 4, 4), d.to_vec()).unwrap();

        let mut conv = Conv3x3::new(2, 3, &mut r);
        // loss = weighted sum of outputs so the gradient is nontrivial
        let weights: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i % 5) as f64) - 2.0).collect();
        let loss = |y: &Array4<f64>| -> f64 {
            y.iter().zip(&weights).map(|(v, w)| v * w).sum()
        };

        // analytic
        let y = conv.forward_train(&make_x(&x0));
        let gout = Array4::from_shape_vec((2, 3, 4, 4), weights.clone()).unwrap();
        let dx = conv.backward(&gout);

        // numeric wrt input
        let conv2 = conv.clone();
        let mut f = |d: &[f64]| loss(&conv2.forward_eval(&make_x(d)));
        let num_dx = fd_grad(&mut f, &x0, 1e-5);
        assert_close(dx.as_slice().unwrap(), &num_dx, 1e-5, "conv dx");

        // numeric wrt weights
        let w0 = conv.weight.data.clone();
        let mut fw = |wd: &[f64]| {
            let mut c = conv.clone();
            c.weight.data = wd.to_vec();
            loss(&c.forward_eval(&make_x(&x0)))
        };
        let num_dw = fd_grad(&mut fw, &w0, 1e-5);
        assert_close(&conv.weight.grad, &num_dw, 1e-5, "conv dw");
        let _ = y;
    }

    #[test]
    fn batchnorm_gradients_match_finite_differences() {
        let mut r = rng();
        let x0: Vec<f64> = (0..3 * 2 * 2 * 2).map(|_| r.random_range(-2.0..2.0)).collect();
        let make_x = |d: &[f64]| Array4::from_shape_vec((3, 2, 2, 2), d.to_vec()).unwrap();
        let weights: Vec<f64> = (0..3 * 2 * 2 * 2).map(|i| ((i % 7) as f64) * 0.3 - 1.0).collect();
        let loss_of = |bn: &mut BatchNorm2d, d: &[f64]| -> f64 {
            bn.forward_train(&make_x(d))
                .iter()
                .zip(&weights)
                .map(|(v, w)| v * w)
                .sum()
        };

        let mut bn = BatchNorm2d::new(2);
        bn.gamma.data = vec![1.3, 0.7];
        bn.beta.data = vec![0.1, -0.2];

        let mut bn_train = bn.clone();
        let _ = loss_of(&mut bn_train, &x0);
        let gout = Array4::from_shape_vec((3, 2, 2, 2), weights.clone()).unwrap();
        let dx = bn_train.backward(&gout);

        let mut f = |d: &[f64]| {
            let mut b = bn.clone();
            loss_of(&mut b, d)
        };
        let num_dx = fd_grad(&mut f, &x0, 1e-6);
        assert_close(dx.as_slice().unwrap(), &num_dx, 1e-4, "bn dx");

        let g0 = bn.gamma.data.clone();
        let mut fg = |gd: &[f64]| {
            let mut b = bn.clone();
            b.gamma.data = gd.to_vec();
            loss_of(&mut b, &x0)
        };
        let num_dg = fd_grad(&mut fg, &g0, 1e-6);
        assert_close(&bn_train.gamma.grad, &num_dg, 1e-4, "bn dgamma");
    }

    #[test]
    fn pool_routes_gradient_to_argmax() {
        let x = Array4::from_shape_vec(
            (1, 1, 2, 2),
            vec![1.0, 5.0, 2.0, 3.0],
        )
        .unwrap();
        let mut pool = MaxPool2x2::new();
        let y = pool.forward_train(&x);
        assert_eq!(y[(0, 0, 0, 0)], 5.0);
        let dy = Array4::from_elem((1, 1, 1, 1), 2.0);
        let dx = pool.backward(&dy);
        assert_eq!(dx[(0, 0, 0, 1)], 2.0);
        assert_eq!(dx[(0, 0, 0, 0)], 0.0);
    }

    #[test]
    fn pool_identity_below_2px() {
        let x = Array4::from_elem((1, 2, 1, 1), 3.0);
        let mut pool = MaxPool2x2::new();
        let y = pool.forward_train(&x);
        assert_eq!(y, x);
        let dx = pool.backward(&y);
        assert_eq!(dx, x);
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut r = rng();
        let x0: Vec<f64> = (0..3 * 4).map(|_| r.random_range(-1.0..1.0)).collect();
        let make_x = |d: &[f64]| Array2::from_shape_vec((3, 4), d.to_vec()).unwrap();
        let mut lin = Linear::new(4, 2, &mut r);
        let weights: Vec<f64> = (0..3 * 2).map(|i| i as f64 * 0.5 - 1.0).collect();
        let loss = |y: &Array2<f64>| -> f64 { y.iter().zip(&weights).map(|(v, w)| v * w).sum() };

        let _ = lin.forward_train(&make_x(&x0));
        let gout = Array2::from_shape_vec((3, 2), weights.clone()).unwrap();
        let dx = lin.backward(&gout);

        let lin2 = lin.clone();
        let mut f = |d: &[f64]| loss(&lin2.forward_eval(&make_x(d)));
        let num_dx = fd_grad(&mut f, &x0, 1e-6);
        assert_close(dx.as_slice().unwrap(), &num_dx, 1e-5, "linear dx");

        let w0 = lin.weight.data.clone();
        let mut fw = |wd: &[f64]| {
            let mut l = lin.clone();
            l.weight.data = wd.to_vec();
            loss(&l.forward_eval(&make_x(&x0)))
        };
        let num_dw = fd_grad(&mut fw, &w0, 1e-6);
        assert_close(&lin.weight.grad, &num_dw, 1e-5, "linear dw");
    }

    #[test]
    fn gap_backward_distributes_evenly() {
        let x = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut gap = GlobalAvgPool::new();
        let y = gap.forward_train(&x);
        assert_eq!(y[(0, 0)], 2.5);
        let dy = Array2::from_elem((1, 1), 4.0);
        let dx = gap.backward(&dy);
        for v in dx.iter() {
            assert_eq!(*v, 1.0);
        }
    }

    #[test]
    fn convblock_composition_gradchecks() {
        let mut r = rng();
        let x0: Vec<f64> = (0..2 * 2 * 4 * 4).map(|_| r.random_range(-1.0..1.0)).collect();
        let make_x = |d: &[f64]| Array4::from_shape_vec((2, 2, 4, 4), d.to_vec()).unwrap();
        let mut block = ConvBlock::new(2, 3, &mut r);
        let weights: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| ((i % 3) as f64) - 1.0).collect();

        let y = block.forward_train(&make_x(&x0));
        assert_eq!(y.dim(), (2, 3, 2, 2));
        let gout = Array4::from_shape_vec((2, 3, 2, 2), weights.clone()).unwrap();
        let dx = block.backward(&gout);

        let mut f = |d: &[f64]| {
            let mut b = block.clone();
            b.forward_train(&make_x(d))
                .iter()
                .zip(&weights)
                .map(|(v, w)| v * w)
                .sum()
        };
        let num_dx = fd_grad(&mut f, &x0, 1e-6);
        // ReLU and max-pool kinks make individual entries non-smooth; use a
        // modest tolerance with absolute slack.
        for (i, (a, n)) in dx.iter().zip(num_dx.iter()).enumerate() {
            let denom = a.abs().max(n.abs()).max(1e-3);
            assert!(
                (a - n).abs() / denom < 1e-3,
                "block dx[{i}]: {a} vs {n}"
            );
        }
    }
}
