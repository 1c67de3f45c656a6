//! Independent oracles shared by the integration and acceptance tests. None of
//! these call the decompositions under test.

#![allow(dead_code)]

use odlnn::losses::{self, LossKind, LossModel};
use odlnn::matcore::{self, Matrix};
use odlnn::network::{self, Activation, InitScheme, NetworkShape, Odlnn};
use rand::Rng as _;

/// Triple-loop product.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.ncols(), b.nrows());
    let mut out = Matrix::zeros(a.nrows(), b.ncols());
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[(i, k)] * b[(k, j)];
            }
            out[(i, j)] = s;
        }
    }
    out
}

/// Cyclic Jacobi eigensolver for a symmetric matrix: `(eigenvalues, eigenvectors
/// as columns)`, eigenvalues descending.
pub fn jacobi_eigen(sym: &Matrix) -> (Vec<f64>, Matrix) {
    let n = sym.nrows();
    let mut a = sym.clone();
    let mut v = Matrix::identity(n, n);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off <= 1e-30 * a.norm_squared().max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let vals = order.iter().map(|&i| a[(i, i)]).collect();
    let vecs = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    (vals, vecs)
}

/// Singular values from the Gram matrix of the smaller side.
pub fn jacobi_singular_values(a: &Matrix) -> Vec<f64> {
    let gram = if a.nrows() >= a.ncols() {
        naive_matmul(&a.transpose(), a)
    } else {
        naive_matmul(a, &a.transpose())
    };
    jacobi_eigen(&gram).0.into_iter().map(|l| l.max(0.0).sqrt()).collect()
}

/// Polar factor `Â(ÂᵀÂ)^{-1/2}` of a tall matrix through the Jacobi eigensolver.
pub fn polar_via_jacobi(tall: &Matrix) -> Matrix {
    let (vals, vecs) = jacobi_eigen(&naive_matmul(&tall.transpose(), tall));
    let n = vals.len();
    let mut scaled = vecs.clone();
    for j in 0..n {
        scaled.column_mut(j).scale_mut(1.0 / vals[j].sqrt());
    }
    naive_matmul(tall, &naive_matmul(&scaled, &vecs.transpose()))
}

pub fn random_dims(rng: &mut matcore::Rng, depth: usize, max_dim: usize) -> Vec<usize> {
    (0..=depth).map(|_| rng.random_range(1..=max_dim)).collect()
}

/// Column orthonormal `m × n` (or row orthonormal when `m < n`) point.
pub fn stiefel_matrix(m: usize, n: usize, seed: u64) -> Matrix {
    if m >= n {
        matcore::random_orthonormal(m, n, seed).unwrap()
    } else {
        matcore::random_orthonormal(n, m, seed).unwrap().transpose()
    }
}

pub fn net_from_layers(shape: &NetworkShape, layers: &[Matrix]) -> Odlnn {
    Odlnn::new_unchecked(shape.clone(), layers[0].clone(), layers[1..].to_vec()).unwrap()
}

/// One-hot labels with `classes` rows.
pub fn one_hot(classes: usize, n: usize, rng: &mut matcore::Rng) -> Matrix {
    let mut y = Matrix::zeros(classes, n);
    for j in 0..n {
        y[(rng.random_range(0..classes), j)] = 1.0;
    }
    y
}

/// Relative errors of analytic directional derivatives against central finite
/// differences, one per probe direction.
pub fn gradient_probe_errors(depth: usize, kind: LossKind, act: Activation, probes: usize, seed: u64) -> Vec<f64> {
    let mut rng = matcore::rng_from_seed(seed);
    let dims = random_dims(&mut rng, depth, 10);
    let n = rng.random_range(3..=8);
    let shape = NetworkShape::auto(dims.clone(), act).unwrap();
    let net = network::init_student(&shape, InitScheme::UniformFanIn, seed).unwrap();
    let mut layers: Vec<Matrix> = net.layers().cloned().collect();
    // Scale W_1 up so the loss is not flat.
    layers[0] *= 2.0;
    let x = matcore::gaussian(dims[0], n, &mut rng);
    let model = LossModel::for_kind(kind);
    let y_star = match kind {
        LossKind::ScaledMse => matcore::gaussian(dims[depth], n, &mut rng),
        LossKind::SoftmaxCe => one_hot(dims[depth], n, &mut rng),
    };
    let f = |ls: &[Matrix]| {
        let y = network::forward(&net_from_layers(&shape, ls), &x).unwrap();
        losses::loss_value(&model, &y, &y_star).unwrap()
    };
    let base = net_from_layers(&shape, &layers);
    let y = network::forward(&base, &x).unwrap();
    let g = losses::loss_grad(&model, &y, &y_star).unwrap();
    let grads = network::layer_gradients(&base, &x, &g).unwrap();
    let h = 1e-6;
    (0..probes)
        .map(|_| {
            let dirs: Vec<Matrix> = layers
                .iter()
                .map(|l| matcore::gaussian(l.nrows(), l.ncols(), &mut rng))
                .collect();
            let shifted = |s: f64| -> Vec<Matrix> { layers.iter().zip(&dirs).map(|(l, d)| l + d * s).collect() };
            let fd = (f(&shifted(h)) - f(&shifted(-h))) / (2.0 * h);
            let an: f64 = grads.iter().zip(&dirs).map(|(g, d)| g.dot(d)).sum();
            (an - fd).abs() / an.abs().max(fd.abs()).max(1e-300)
        })
        .collect()
}

/// `R_iᵀ W_i★ R_{i−1}` applied layer by layer for random orthogonal `R_i`
/// (`R_0 = R_N = I`): a point on the teacher's gauge orbit.
pub fn gauge_orbit(teacher: &Odlnn, seed: u64) -> Odlnn {
    let dims = teacher.shape().dims();
    let n = teacher.depth();
    let qs: Vec<Matrix> = (1..n)
        .map(|i| matcore::random_orthonormal(dims[i], dims[i], seed + i as u64).unwrap())
        .collect();
    let mut layers = Vec::with_capacity(n);
    for i in 1..=n {
        let mut m = teacher.layer(i).clone();
        if i >= 2 {
            m = naive_matmul(&m, &qs[i - 2]);
        }
        if i < n {
            m = naive_matmul(&qs[i - 1].transpose(), &m);
        }
        layers.push(m);
    }
    Odlnn::new(teacher.shape().clone(), layers[0].clone(), layers[1..].to_vec()).unwrap()
}

fn rotation(theta: f64, reflect: bool) -> Matrix {
    let (s, c) = theta.sin_cos();
    if reflect {
        Matrix::from_row_slice(2, 2, &[c, s, s, -c])
    } else {
        Matrix::from_row_slice(2, 2, &[c, -s, s, c])
    }
}

/// Depth-two distance objective for a single `R ∈ O(2)`.
pub fn depth_two_objective(w: &Odlnn, w_star: &Odlnn, scale: f64, r: &Matrix) -> f64 {
    let top = w.layer(2) - naive_matmul(w_star.layer(2), r);
    let bottom = w.layer(1) - naive_matmul(&r.transpose(), w_star.layer(1));
    scale * scale * top.norm_squared() + bottom.norm_squared()
}

/// Minimum over O(2) by an angle grid with 1e-4 rad spacing on both
/// components, polished by golden-section search around the best cell.
pub fn o2_grid_min(w: &Odlnn, w_star: &Odlnn, scale: f64) -> f64 {
    let step = 1e-4;
    let cells = (std::f64::consts::TAU / step).ceil() as usize;
    let mut best = f64::INFINITY;
    for reflect in [false, true] {
        let obj = |t: f64| depth_two_objective(w, w_star, scale, &rotation(t, reflect));
        let (mut bt, mut bv) = (0.0, f64::INFINITY);
        for k in 0..cells {
            let t = k as f64 * step;
            let v = obj(t);
            if v < bv {
                (bt, bv) = (t, v);
            }
        }
        let (mut lo, mut hi) = (bt - step, bt + step);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..60 {
            let a = hi - g * (hi - lo);
            let b = lo + g * (hi - lo);
            if obj(a) < obj(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        best = best.min(bv).min(obj(0.5 * (lo + hi)));
    }
    best
}
