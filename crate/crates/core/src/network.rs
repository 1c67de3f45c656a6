//! Orthonormal deep linear networks (optionally with ReLU between layers),
//! full-batch backpropagation and the teacher/student generators.

use rand::Rng as _;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matcore::{self, Matrix};
use crate::stiefel::{self, Orientation, StiefelPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
}

/// Layer widths `d_0, …, d_N` plus the orientation of each constrained layer
/// `2..=N` (index 0 of `orientations` is layer 2).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkShape {
    dims: Vec<usize>,
    orientations: Vec<Orientation>,
    activation: Activation,
}

impl NetworkShape {
    pub fn new(
        dims: Vec<usize>,
        orientations: Vec<Orientation>,
        activation: Activation,
    ) -> Result<Self> {
        if dims.len() < 3 {
            return Err(Error::InvalidShape {
                op: "NetworkShape",
                detail: format!("need depth >= 2, got dims {dims:?}"),
            });
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape {
                op: "NetworkShape",
                detail: format!("zero width in {dims:?}"),
            });
        }
        if orientations.len() != dims.len() - 2 {
            return Err(Error::InvalidShape {
                op: "NetworkShape",
                detail: format!(
                    "{} orientations for {} constrained layers",
                    orientations.len(),
                    dims.len() - 2
                ),
            });
        }
        for (k, o) in orientations.iter().enumerate() {
            let layer = k + 2;
            if !o.is_feasible(dims[layer], dims[layer - 1]) {
                return Err(Error::InvalidShape {
                    op: "NetworkShape",
                    detail: format!(
                        "layer {layer} ({}x{}) cannot be {o:?}-orthonormal",
                        dims[layer],
                        dims[layer - 1]
                    ),
                });
            }
        }
        Ok(NetworkShape {
            dims,
            orientations,
            activation,
        })
    }

    /// Every constrained layer column-orthonormal, as in the analysed model.
    pub fn columns(dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let n = dims.len().saturating_sub(2);
        Self::new(dims, vec![Orientation::Column; n], activation)
    }

    /// Column orientation where the width grows or stays, row where it shrinks.
    pub fn auto(dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let orientations = (2..dims.len())
            .map(|i| Orientation::for_layer(dims[i - 1], dims[i]))
            .collect();
        Self::new(dims, orientations, activation)
    }

    pub fn depth(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn orientations(&self) -> &[Orientation] {
        &self.orientations
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Shape of layer `i` (1-based).
    pub fn layer_shape(&self, i: usize) -> (usize, usize) {
        (self.dims[i], self.dims[i - 1])
    }

    pub fn with_activation(&self, activation: Activation) -> Self {
        NetworkShape {
            activation,
            ..self.clone()
        }
    }

    /// Generic rank of the end-to-end map.
    pub fn bottleneck(&self) -> usize {
        *self.dims.iter().min().expect("nonempty")
    }
}

/// Weights `W_1` (free) and `W_2..W_N` (Stiefel-constrained).
#[derive(Debug, Clone, PartialEq)]
pub struct Odlnn {
    shape: NetworkShape,
    w1: Matrix,
    constrained: Vec<StiefelPoint>,
}

impl Odlnn {
    /// Assembles a network; constrained layers must be orthonormal.
    pub fn new(shape: NetworkShape, w1: Matrix, constrained: Vec<Matrix>) -> Result<Self> {
        Self::assemble(shape, w1, constrained, true)
    }

    /// As [`Odlnn::new`] without the orthonormality check.
    pub fn new_unchecked(shape: NetworkShape, w1: Matrix, constrained: Vec<Matrix>) -> Result<Self> {
        Self::assemble(shape, w1, constrained, false)
    }

    fn assemble(
        shape: NetworkShape,
        w1: Matrix,
        constrained: Vec<Matrix>,
        checked: bool,
    ) -> Result<Self> {
        if w1.shape() != shape.layer_shape(1) {
            return Err(Error::InvalidShape {
                op: "Odlnn",
                detail: format!("W_1 is {:?}, expected {:?}", w1.shape(), shape.layer_shape(1)),
            });
        }
        if constrained.len() != shape.depth() - 1 {
            return Err(Error::InvalidShape {
                op: "Odlnn",
                detail: format!("{} constrained layers for depth {}", constrained.len(), shape.depth()),
            });
        }
        let mut points = Vec::with_capacity(constrained.len());
        for (k, m) in constrained.into_iter().enumerate() {
            let layer = k + 2;
            if m.shape() != shape.layer_shape(layer) {
                return Err(Error::InvalidShape {
                    op: "Odlnn",
                    detail: format!(
                        "W_{layer} is {:?}, expected {:?}",
                        m.shape(),
                        shape.layer_shape(layer)
                    ),
                });
            }
            let o = shape.orientations[k];
            points.push(if checked {
                StiefelPoint::new(m, o)?
            } else {
                StiefelPoint::new_unchecked(m, o)?
            });
        }
        Ok(Odlnn {
            shape,
            w1,
            constrained: points,
        })
    }

    pub(crate) fn from_parts(shape: NetworkShape, w1: Matrix, constrained: Vec<StiefelPoint>) -> Self {
        debug_assert_eq!(constrained.len(), shape.depth() - 1);
        Odlnn {
            shape,
            w1,
            constrained,
        }
    }

    pub fn shape(&self) -> &NetworkShape {
        &self.shape
    }

    pub fn depth(&self) -> usize {
        self.shape.depth()
    }

    pub fn w1(&self) -> &Matrix {
        &self.w1
    }

    pub fn constrained(&self) -> &[StiefelPoint] {
        &self.constrained
    }

    /// Layer `i` (1-based).
    pub fn layer(&self, i: usize) -> &Matrix {
        if i == 1 {
            &self.w1
        } else {
            self.constrained[i - 2].mat()
        }
    }

    pub fn layers(&self) -> impl Iterator<Item = &Matrix> {
        std::iter::once(&self.w1).chain(self.constrained.iter().map(|p| p.mat()))
    }

    /// Largest orthonormality defect over the constrained layers.
    pub fn max_defect(&self) -> f64 {
        self.constrained
            .iter()
            .map(StiefelPoint::defect)
            .fold(0.0, f64::max)
    }

    pub fn with_activation(&self, activation: Activation) -> Self {
        Odlnn {
            shape: self.shape.with_activation(activation),
            ..self.clone()
        }
    }
}

fn relu_in_place(m: &mut Matrix) {
    m.iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Per-layer inputs `h_0 = X, h_1, …, h_{N-1}` and the output; `X` is
/// borrowed since it can be large.
struct ForwardCache<'a> {
    x: &'a Matrix,
    hidden: Vec<Matrix>,
    output: Matrix,
}

impl ForwardCache<'_> {
    fn input(&self, i: usize) -> &Matrix {
        if i == 0 {
            self.x
        } else {
            &self.hidden[i - 1]
        }
    }
}

fn forward_cached<'a>(net: &Odlnn, x: &'a Matrix) -> Result<ForwardCache<'a>> {
    let d0 = net.shape.dims[0];
    if x.nrows() != d0 {
        return Err(Error::Shape {
            op: "forward",
            left: net.w1.shape(),
            right: x.shape(),
        });
    }
    let n_layers = net.depth();
    let relu = net.shape.activation == Activation::Relu;
    let mut hidden = Vec::with_capacity(n_layers - 1);
    let mut output = Matrix::zeros(0, 0);
    for (i, w) in net.layers().enumerate() {
        let h = if i == 0 { x } else { &hidden[i - 1] };
        let mut z = matcore::matmul(w, h)?;
        if relu && i + 1 < n_layers {
            relu_in_place(&mut z);
        }
        if i + 1 < n_layers {
            hidden.push(z);
        } else {
            output = z;
        }
    }
    Ok(ForwardCache { x, hidden, output })
}

/// `a bᵀ`, transposing whichever operand is smaller (copying a wide data
/// matrix dominates the cost otherwise).
fn mul_transposed(a: &Matrix, b: &Matrix) -> Matrix {
    if b.nrows() > a.nrows() {
        (b * a.transpose()).transpose()
    } else {
        a * b.transpose()
    }
}

/// `W_N ⋯ W_1 X`, with ReLU after every layer but the last when enabled.
pub fn forward(net: &Odlnn, x: &Matrix) -> Result<Matrix> {
    Ok(forward_cached(net, x)?.output)
}

/// Euclidean gradient of `L(forward(net, x))` with respect to every layer,
/// ordered `W_1..W_N`, given `∇_Y L`.
pub fn layer_gradients(net: &Odlnn, x: &Matrix, grad_loss_y: &Matrix) -> Result<Vec<Matrix>> {
    let cache = forward_cached(net, x)?;
    if grad_loss_y.shape() != cache.output.shape() {
        return Err(Error::shape("layer_gradients", &cache.output, grad_loss_y));
    }
    Ok(backprop(net, &cache, grad_loss_y))
}

/// Forward output together with the layer gradients for a loss gradient
/// computed from that output.
pub fn forward_and_gradients<F>(net: &Odlnn, x: &Matrix, grad_of_output: F) -> Result<(Matrix, Vec<Matrix>)>
where
    F: FnOnce(&Matrix) -> Result<Matrix>,
{
    let cache = forward_cached(net, x)?;
    let g = grad_of_output(&cache.output)?;
    if g.shape() != cache.output.shape() {
        return Err(Error::shape("layer_gradients", &cache.output, &g));
    }
    let grads = backprop(net, &cache, &g);
    Ok((cache.output, grads))
}

fn backprop(net: &Odlnn, cache: &ForwardCache, grad_loss_y: &Matrix) -> Vec<Matrix> {
    let n_layers = net.depth();
    let relu = net.shape.activation == Activation::Relu;
    let mut grads = vec![Matrix::zeros(0, 0); n_layers];
    let mut delta = grad_loss_y.clone();
    for i in (0..n_layers).rev() {
        let input = cache.input(i);
        grads[i] = mul_transposed(&delta, input);
        if i > 0 {
            let mut back = net.layer(i + 1).transpose() * &delta;
            if relu {
                // inputs[i] = relu(z_i): positive exactly where z_i > 0
                back.zip_apply(input, |b, h| {
                    if h <= 0.0 {
                        *b = 0.0
                    }
                });
            }
            delta = back;
        }
    }
    grads
}

/// Ground truth for teacher–student experiments.
#[derive(Debug, Clone)]
pub struct TeacherInstance {
    pub teacher: Odlnn,
    pub x: Matrix,
    pub y_star: Matrix,
    /// Smallest nonzero singular value of `Y★` (index `rank − 1`, where the
    /// rank is the narrowest width of the network).
    pub sigma_min_y: f64,
    pub spec_norm_y: f64,
    pub kappa_y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    /// Spectral norm of `W_1★`.
    pub w1_spectral_norm: f64,
    /// When set, `W_1★` gets singular values evenly spaced from
    /// `w1_spectral_norm` down to `w1_spectral_norm / kappa`.
    pub kappa: Option<f64>,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            w1_spectral_norm: 1.0,
            kappa: None,
        }
    }
}

const MAX_TEACHER_REDRAWS: usize = 10;

fn random_layer(rows: usize, cols: usize, o: Orientation, rng: &mut matcore::Rng) -> Result<Matrix> {
    Ok(match o {
        Orientation::Column => matcore::random_orthonormal_with(rows, cols, rng)?,
        Orientation::Row => matcore::random_orthonormal_with(cols, rows, rng)?.transpose(),
    })
}

fn teacher_w1(rows: usize, cols: usize, cfg: &TeacherConfig, rng: &mut matcore::Rng) -> Result<Matrix> {
    if !(cfg.w1_spectral_norm > 0.0) {
        return Err(Error::Generation(format!(
            "W_1 spectral norm must be positive, got {}",
            cfg.w1_spectral_norm
        )));
    }
    let r = rows.min(cols);
    if let Some(kappa) = cfg.kappa {
        if !(kappa >= 1.0) {
            return Err(Error::Generation(format!("target kappa must be >= 1, got {kappa}")));
        }
        let u = matcore::random_orthonormal_with(rows, r, rng)?;
        let v = matcore::random_orthonormal_with(cols, r, rng)?;
        let hi = cfg.w1_spectral_norm;
        let lo = hi / kappa;
        let mut us = u;
        for j in 0..r {
            let t = if r == 1 { 0.0 } else { j as f64 / (r - 1) as f64 };
            us.column_mut(j).scale_mut(hi + (lo - hi) * t);
        }
        return Ok(us * v.transpose());
    }
    for _ in 0..MAX_TEACHER_REDRAWS {
        let g = matcore::gaussian(rows, cols, rng);
        let s = matcore::singular_values(&g)?;
        let (hi, lo) = (s[0], s[r - 1]);
        if lo > 1e-8 * hi {
            return Ok(g * (cfg.w1_spectral_norm / hi));
        }
    }
    Err(Error::Generation(format!(
        "W_1 ({rows}x{cols}) rank deficient after {MAX_TEACHER_REDRAWS} draws"
    )))
}

pub fn make_teacher(shape: &NetworkShape, n: usize, seed: u64) -> Result<TeacherInstance> {
    make_teacher_with(shape, n, &TeacherConfig::default(), seed)
}

pub fn make_teacher_with(
    shape: &NetworkShape,
    n: usize,
    cfg: &TeacherConfig,
    seed: u64,
) -> Result<TeacherInstance> {
    let mut rng = matcore::rng_from_seed(seed);
    let (d1, d0) = shape.layer_shape(1);
    let w1 = teacher_w1(d1, d0, cfg, &mut rng)?;
    let mut constrained = Vec::with_capacity(shape.depth() - 1);
    for (k, &o) in shape.orientations.iter().enumerate() {
        let (r, c) = shape.layer_shape(k + 2);
        constrained.push(random_layer(r, c, o, &mut rng)?);
    }
    let teacher = Odlnn::new(shape.clone(), w1, constrained)?;
    let x = matcore::whitened_input_with(d0, n, &mut rng)?;
    let y_star = forward(&teacher, &x)?;
    let s = matcore::singular_values(&y_star)?;
    let rank = shape.bottleneck().min(n);
    let sigma_min_y = s[rank - 1];
    let spec_norm_y = s[0];
    if !(sigma_min_y > 1e-10 * spec_norm_y) {
        return Err(Error::Generation(format!(
            "Y* is rank deficient (sigma_{rank} = {sigma_min_y:e})"
        )));
    }
    Ok(TeacherInstance {
        teacher,
        x,
        y_star,
        sigma_min_y,
        spec_norm_y,
        kappa_y: spec_norm_y / sigma_min_y,
    })
}

#[derive(Debug, Clone, Copy)]
pub enum InitScheme<'a> {
    /// Every layer orthonormal (W_1 in whichever orientation fits).
    Orthogonal,
    /// W_1 uniform on (−1/√d_0, 1/√d_0), constrained layers orthonormal.
    UniformFanIn,
    /// Teacher perturbed by `magnitude` on every layer.
    NearTeacher { teacher: &'a Odlnn, magnitude: f64 },
}

pub fn init_student(shape: &NetworkShape, scheme: InitScheme<'_>, seed: u64) -> Result<Odlnn> {
    let mut rng = matcore::rng_from_seed(seed);
    let (d1, d0) = shape.layer_shape(1);
    match scheme {
        InitScheme::Orthogonal | InitScheme::UniformFanIn => {
            let w1 = if matches!(scheme, InitScheme::Orthogonal) {
                random_layer(d1, d0, Orientation::for_layer(d0, d1), &mut rng)?
            } else {
                let bound = 1.0 / (d0 as f64).sqrt();
                let dist = Uniform::new(-bound, bound).expect("valid bounds");
                Matrix::from_fn(d1, d0, |_, _| loop {
                    let v: f64 = rng.sample(dist);
                    if v != -bound {
                        break v;
                    }
                })
            };
            let mut constrained = Vec::with_capacity(shape.depth() - 1);
            for (k, &o) in shape.orientations.iter().enumerate() {
                let (r, c) = shape.layer_shape(k + 2);
                constrained.push(random_layer(r, c, o, &mut rng)?);
            }
            Odlnn::new(shape.clone(), w1, constrained)
        }
        InitScheme::NearTeacher { teacher, magnitude } => {
            if teacher.shape.dims != shape.dims || teacher.shape.orientations != shape.orientations {
                return Err(Error::InvalidShape {
                    op: "init_student",
                    detail: "teacher shape differs from requested shape".into(),
                });
            }
            if !(magnitude >= 0.0) {
                return Err(Error::Precondition(format!(
                    "perturbation magnitude must be >= 0, got {magnitude}"
                )));
            }
            let g = matcore::gaussian(d1, d0, &mut rng);
            let gn = g.norm();
            let w1 = if magnitude == 0.0 || gn == 0.0 {
                teacher.w1.clone()
            } else {
                &teacher.w1 + g * (magnitude / gn)
            };
            let constrained = teacher
                .constrained
                .iter()
                .map(|p| stiefel::perturb_on_manifold_with(p, magnitude, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(Odlnn::from_parts(shape.clone(), w1, constrained))
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"ODLN";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint: magic `ODLN`, little-endian `u32` version, activation
/// byte, `u32` depth, `u32` widths, one orientation byte per constrained
/// layer, then every layer row-major as little-endian `f64`.
pub fn to_checkpoint_bytes(net: &Odlnn) -> Vec<u8> {
    let shape = &net.shape;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match shape.activation {
        Activation::Linear => 0,
        Activation::Relu => 1,
    });
    out.extend_from_slice(&(shape.depth() as u32).to_le_bytes());
    for &d in &shape.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for o in &shape.orientations {
        out.push(match o {
            Orientation::Column => 0,
            Orientation::Row => 1,
        });
    }
    for w in net.layers() {
        for i in 0..w.nrows() {
            for j in 0..w.ncols() {
                out.extend_from_slice(&w[(i, j)].to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (needed {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Odlnn> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let activation = match r.u8()? {
        0 => Activation::Linear,
        1 => Activation::Relu,
        b => return Err(Error::Checkpoint(format!("unknown activation tag {b}"))),
    };
    let depth = r.u32()? as usize;
    if !(2..=4096).contains(&depth) {
        return Err(Error::Checkpoint(format!("implausible depth {depth}")));
    }
    let dims = (0..=depth)
        .map(|_| r.u32().map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let orientations = (0..depth - 1)
        .map(|_| match r.u8()? {
            0 => Ok(Orientation::Column),
            1 => Ok(Orientation::Row),
            b => Err(Error::Checkpoint(format!("unknown orientation tag {b}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let shape = NetworkShape::new(dims, orientations, activation)?;
    let mut layers = Vec::with_capacity(depth);
    for i in 1..=depth {
        let (rows, cols) = shape.layer_shape(i);
        let mut m = Matrix::zeros(rows, cols);
        for a in 0..rows {
            for b in 0..cols {
                m[(a, b)] = r.f64()?;
            }
        }
        layers.push(m);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    let mut it = layers.into_iter();
    let w1 = it.next().expect("depth >= 2");
    Odlnn::new_unchecked(shape, w1, it.collect())
}

pub fn save_checkpoint(net: &Odlnn, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, to_checkpoint_bytes(net)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Odlnn> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_checkpoint_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{gaussian, rng_from_seed};

    #[test]
    fn identity_network_is_identity() {
        let shape = NetworkShape::columns(vec![3, 3, 3], Activation::Linear).unwrap();
        let net = Odlnn::new(shape, Matrix::identity(3, 3), vec![Matrix::identity(3, 3)]).unwrap();
        let x = gaussian(3, 5, &mut rng_from_seed(1));
        assert_eq!(forward(&net, &x).unwrap(), x);
    }

    #[test]
    fn forward_matches_chain_product() {
        let shape = NetworkShape::columns(vec![4, 3, 5, 6], Activation::Linear).unwrap();
        let net = init_student(&shape, InitScheme::Orthogonal, 2).unwrap();
        let x = gaussian(4, 7, &mut rng_from_seed(3));
        let chain = net.layer(3) * net.layer(2) * net.layer(1) * &x;
        assert!((forward(&net, &x).unwrap() - chain).amax() < 1e-12);
    }

    #[test]
    fn scalar_chain_gradients_by_hand() {
        let shape = NetworkShape::columns(vec![1, 1, 1], Activation::Linear).unwrap();
        let (w1, w2, y_star) = (0.7, -1.0, 0.3);
        let net = Odlnn::new(
            shape,
            Matrix::from_element(1, 1, w1),
            vec![Matrix::from_element(1, 1, w2)],
        )
        .unwrap();
        let x = Matrix::from_element(1, 1, 1.0);
        let r = w2 * w1 - y_star;
        let g = layer_gradients(&net, &x, &Matrix::from_element(1, 1, r)).unwrap();
        assert!((g[0][(0, 0)] - w2 * r).abs() < 1e-15);
        assert!((g[1][(0, 0)] - w1 * r).abs() < 1e-15);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let shape = NetworkShape::columns(vec![4, 3, 3, 5], Activation::Relu).unwrap();
        let net = init_student(&shape, InitScheme::Orthogonal, 4).unwrap();
        let x = gaussian(4, 6, &mut rng_from_seed(5));
        let g = layer_gradients(&net, &x, &Matrix::zeros(5, 6)).unwrap();
        assert!(g.iter().all(|m| m.iter().all(|&v| v == 0.0)));
        assert!(layer_gradients(&net, &x, &Matrix::zeros(4, 6)).is_err());
    }

    #[test]
    fn relu_is_skipped_on_last_layer() {
        let shape = NetworkShape::columns(vec![1, 1, 1], Activation::Relu).unwrap();
        let net = Odlnn::new(
            shape,
            Matrix::from_element(1, 1, 2.0),
            vec![Matrix::from_element(1, 1, -1.0)],
        )
        .unwrap();
        let y = forward(&net, &Matrix::from_element(1, 1, 1.0)).unwrap();
        assert_eq!(y[(0, 0)], -2.0);
    }

    #[test]
    fn shape_validation() {
        assert!(NetworkShape::columns(vec![3, 4], Activation::Linear).is_err());
        assert!(NetworkShape::columns(vec![3, 4, 2], Activation::Linear).is_err());
        let auto = NetworkShape::auto(vec![784, 100, 100, 50, 10], Activation::Linear).unwrap();
        assert_eq!(
            auto.orientations(),
            &[Orientation::Column, Orientation::Row, Orientation::Row]
        );
    }

    #[test]
    fn teacher_energy_identities() {
        let shape = NetworkShape::columns(vec![6, 4, 5, 7], Activation::Linear).unwrap();
        let t = make_teacher(&shape, 12, 9).unwrap();
        assert_eq!(t.y_star, forward(&t.teacher, &t.x).unwrap());
        assert!(t.teacher.max_defect() < 1e-12);
        let w1 = t.teacher.w1();
        assert!((t.spec_norm_y - matcore::spectral_norm(w1).unwrap()).abs() < 1e-8);
        assert!((t.spec_norm_y - 1.0).abs() < 1e-8);
        assert!((t.sigma_min_y - matcore::sigma_min(w1).unwrap()).abs() < 1e-8);
        assert!((t.y_star.norm() - w1.norm()).abs() < 1e-10);
        let chain = t.teacher.layer(3) * t.teacher.layer(2) * w1 * &t.x;
        assert!((chain - &t.y_star).amax() < 1e-12);
    }

    #[test]
    fn teacher_kappa_knob() {
        let shape = NetworkShape::columns(vec![6, 4, 4, 4], Activation::Linear).unwrap();
        let cfg = TeacherConfig {
            w1_spectral_norm: 2.0,
            kappa: Some(3.0),
        };
        let t = make_teacher_with(&shape, 10, &cfg, 1).unwrap();
        assert!((t.kappa_y - 3.0).abs() < 1e-9);
        assert!((t.spec_norm_y - 2.0).abs() < 1e-9);
    }

    #[test]
    fn uniform_fan_in_range() {
        let shape = NetworkShape::auto(vec![784, 100, 100, 50, 10], Activation::Linear).unwrap();
        let net = init_student(&shape, InitScheme::UniformFanIn, 3).unwrap();
        let b = 1.0 / 784f64.sqrt();
        assert!(net.w1().iter().all(|&v| v > -b && v < b));
        assert!(net.max_defect() < 1e-10);
    }

    #[test]
    fn near_teacher_zero_magnitude_is_teacher() {
        let shape = NetworkShape::columns(vec![5, 3, 4, 4], Activation::Linear).unwrap();
        let t = make_teacher(&shape, 8, 2).unwrap();
        let s = init_student(
            &shape,
            InitScheme::NearTeacher {
                teacher: &t.teacher,
                magnitude: 0.0,
            },
            7,
        )
        .unwrap();
        assert_eq!(s, t.teacher);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let shape = NetworkShape::auto(vec![5, 4, 4, 2], Activation::Relu).unwrap();
        let net = init_student(&shape, InitScheme::Orthogonal, 1).unwrap();
        let bytes = to_checkpoint_bytes(&net);
        assert_eq!(from_checkpoint_bytes(&bytes).unwrap(), net);
        assert!(from_checkpoint_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_checkpoint_bytes(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(from_checkpoint_bytes(&long).is_err());
    }
}
