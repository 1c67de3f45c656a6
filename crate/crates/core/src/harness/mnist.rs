//! IDX (MNIST) loading and a synthetic stand-in with the same shapes.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, IdxErrorKind, Result};
use crate::matcore::{self, Matrix};

pub const IMAGE_MAGIC: u32 = 2051;
pub const LABEL_MAGIC: u32 = 2049;
pub const CLASSES: usize = 10;
pub const PIXELS: usize = 784;

#[derive(Debug, Clone, PartialEq)]
pub struct MnistDataset {
    /// `784 × n`, pixels in `[0, 1]`.
    pub images: Matrix,
    /// `10 × n`, one-hot.
    pub labels: Matrix,
}

impl MnistDataset {
    pub fn len(&self) -> usize {
        self.images.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The first `n` samples (all of them when `n` exceeds the size).
    pub fn subset(&self, n: usize) -> MnistDataset {
        let n = n.min(self.len());
        MnistDataset {
            images: self.images.columns(0, n).into_owned(),
            labels: self.labels.columns(0, n).into_owned(),
        }
    }
}

fn idx_err(path: &Path, kind: IdxErrorKind) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        kind,
    }
}

fn be_u32(path: &Path, bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| {
            idx_err(
                path,
                IdxErrorKind::Truncated {
                    expected: offset + 4,
                    found: bytes.len(),
                },
            )
        })
}

/// Parses an IDX file: big-endian magic, big-endian dimension counts, u8
/// payload. Returns the dimension counts and the payload.
fn parse_idx<'a>(path: &Path, bytes: &'a [u8], magic: u32) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(path, bytes, 0)?;
    if found != magic {
        return Err(idx_err(path, IdxErrorKind::BadMagic { found, expected: magic }));
    }
    // The low byte of the magic is the number of dimensions.
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|k| be_u32(path, bytes, 4 + 4 * k).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(idx_err(
            path,
            IdxErrorKind::Truncated {
                expected,
                found: bytes.len(),
            },
        ));
    }
    Ok((dims, &bytes[header..]))
}

pub fn parse_mnist(images_path: &Path, images: &[u8], labels_path: &Path, labels: &[u8]) -> Result<MnistDataset> {
    let (idims, pixels) = parse_idx(images_path, images, IMAGE_MAGIC)?;
    let (ldims, label_bytes) = parse_idx(labels_path, labels, LABEL_MAGIC)?;
    if idims[0] != ldims[0] {
        return Err(idx_err(
            labels_path,
            IdxErrorKind::CountMismatch {
                images: idims[0],
                labels: ldims[0],
            },
        ));
    }
    let n = idims[0];
    let per_image = idims[1] * idims[2];
    let mut img = Matrix::zeros(per_image, n);
    for (j, chunk) in pixels.chunks_exact(per_image.max(1)).enumerate().take(n) {
        for (i, &p) in chunk.iter().enumerate() {
            img[(i, j)] = p as f64 / 255.0;
        }
    }
    let mut lab = Matrix::zeros(CLASSES, n);
    for (j, &l) in label_bytes.iter().enumerate() {
        if l as usize >= CLASSES {
            return Err(idx_err(labels_path, IdxErrorKind::LabelRange(l)));
        }
        lab[(l as usize, j)] = 1.0;
    }
    Ok(MnistDataset {
        images: img,
        labels: lab,
    })
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<MnistDataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    parse_mnist(images_path, &images, labels_path, &labels)
}

/// IDX image file bytes for `n` images of `rows × cols` pixels.
pub fn encode_idx_images(rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let n = pixels.len() as u32 / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, n, rows, cols] {
        out.extend(v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend(LABEL_MAGIC.to_be_bytes());
    out.extend((labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Latent dimension of the synthetic stand-in.
const LATENT: usize = 20;
/// Standard deviation of the class means in latent space (noise has unit
/// variance). Chosen so a linear softmax model plateaus near the training
/// loss it reaches on the real digits (about 0.3).
const CLASS_SPREAD: f64 = 0.7;

/// Synthetic stand-in for MNIST: each class is a Gaussian blob in a
/// 20-dimensional latent space (unit-variance noise around means drawn
/// with standard deviation [`CLASS_SPREAD`], so classes overlap), mapped to 784 pixels by a fixed random linear map
/// around mid-grey and clipped to `[0, 1]`. The low intrinsic dimension keeps
/// the set from being linearly separable at any practical sample size, as
/// with the real digits.
pub fn synthetic_classification(n: usize, seed: u64) -> MnistDataset {
    let mut rng = matcore::rng_from_seed(seed);
    let means = matcore::gaussian(LATENT, CLASSES, &mut rng) * CLASS_SPREAD;
    let mix = matcore::gaussian(PIXELS, LATENT, &mut rng) * (0.1 / (LATENT as f64).sqrt());
    let mut latent = Matrix::zeros(LATENT, n);
    let mut labels = Matrix::zeros(CLASSES, n);
    let unit = Normal::new(0.0, 1.0).expect("valid sigma");
    for j in 0..n {
        let c = rng.random_range(0..CLASSES);
        labels[(c, j)] = 1.0;
        for i in 0..LATENT {
            latent[(i, j)] = means[(i, c)] + unit.sample(&mut rng);
        }
    }
    let images = (mix * latent).map(|v| (0.5 + v).clamp(0.0, 1.0));
    MnistDataset { images, labels }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> (Vec<u8>, Vec<u8>) {
        // Two 2x2 images and labels 3, 0.
        (encode_idx_images(2, 2, &[0, 255, 51, 102, 1, 2, 3, 4]), encode_idx_labels(&[3, 0]))
    }

    fn parse(images: &[u8], labels: &[u8]) -> Result<MnistDataset> {
        parse_mnist(Path::new("img"), images, Path::new("lab"), labels)
    }

    #[test]
    fn fixture_parses_exactly() {
        let (i, l) = fixture();
        assert_eq!(&i[..8], &[0, 0, 8, 3, 0, 0, 0, 2]);
        let d = parse(&i, &l).unwrap();
        let want = Matrix::from_column_slice(4, 2, &[0.0, 1.0, 0.2, 0.4, 1.0 / 255.0, 2.0 / 255.0, 3.0 / 255.0, 4.0 / 255.0]);
        assert_eq!(d.images, want);
        assert_eq!(d.labels.column(0).iter().position(|&v| v == 1.0), Some(3));
        assert_eq!(d.labels.column(1).iter().position(|&v| v == 1.0), Some(0));
        assert_eq!(d.labels.row_sum().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn each_failure_is_distinct() {
        let (i, l) = fixture();
        let kind = |r: Result<MnistDataset>| match r {
            Err(Error::Idx { kind, .. }) => kind,
            other => panic!("unexpected {other:?}"),
        };
        assert!(matches!(kind(parse(&l, &l)), IdxErrorKind::BadMagic { found: 2049, expected: 2051 }));
        assert!(matches!(kind(parse(&i[..i.len() - 1], &l)), IdxErrorKind::Truncated { .. }));
        assert!(matches!(kind(parse(&i[..6], &l)), IdxErrorKind::Truncated { .. }));
        assert!(matches!(
            kind(parse(&i, &encode_idx_labels(&[1]))),
            IdxErrorKind::CountMismatch { images: 2, labels: 1 }
        ));
        assert!(matches!(kind(parse(&i, &encode_idx_labels(&[1, 10]))), IdxErrorKind::LabelRange(10)));
    }

    #[test]
    fn synthetic_set_shapes() {
        let d = synthetic_classification(30, 1);
        assert_eq!(d.images.shape(), (784, 30));
        crate::losses::check_one_hot(&d.labels).unwrap();
        assert!(d.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(d, synthetic_classification(30, 1));
        assert_eq!(d.subset(5).len(), 5);
    }
}
