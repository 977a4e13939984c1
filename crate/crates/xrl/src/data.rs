//! Dataset ingestion: IDX (ubyte) and CIFAR-10 binary loaders, a deterministic
//! held-out split, and a synthetic blob generator for fast tests.
//!
//! Pixels are kept in [0,1] with no mean/std normalization so that ε budgets
//! have pixel-space semantics.

use std::io::Read;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seeds::{rng_for, standard_normal};
use crate::tensor::Tensor;

/// An immutable labeled image set. `images` is [N,C,H,W] in [0,1].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// train / test / synth, plus provenance for reports
    pub source: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataFormat {
    Idx,
    CifarBinary,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Single [C,H,W] image.
    pub fn image(&self, i: usize) -> Tensor {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        Tensor::new(
            vec![c, h, w],
            self.images.data()[i * per..(i + 1) * per].to_vec(),
        )
        .expect("image slice")
    }

    /// Gather a batch [B,C,H,W] plus labels by index.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        (
            Tensor::new(vec![indices.len(), c, h, w], data).expect("batch"),
            labels,
        )
    }

    /// First `n` records in file order.
    pub fn limit(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let indices: Vec<usize> = (0..n).collect();
        self.subset(&indices)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let (images, labels) = self.batch(indices);
        Dataset {
            images,
            labels,
            classes: self.classes,
            source: self.source.clone(),
        }
    }

    /// Deterministic held-out split: the last 10% (at least one image when
    /// N >= 2) becomes the held-out part.
    pub fn split_heldout(&self) -> (Dataset, Dataset) {
        let n = self.len();
        let held = if n >= 2 { (n / 10).max(1) } else { 0 };
        let train: Vec<usize> = (0..n - held).collect();
        let heldout: Vec<usize> = (n - held..n).collect();
        (self.subset(&train), self.subset(&heldout))
    }

    fn validate(&self) -> Result<()> {
        for (i, &v) in self.images.data().iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::ImageRange {
                    detail: format!("dataset pixel {} = {}", i, v),
                });
            }
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: self.classes,
                });
            }
            let _ = i;
        }
        Ok(())
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn be_u32(buf: &[u8], offset: usize, what: &str) -> Result<u32> {
    let end = offset + 4;
    if buf.len() < end {
        return Err(Error::Parse {
            offset: buf.len() as u64,
            detail: format!("truncated while reading {}", what),
        });
    }
    Ok(u32::from_be_bytes([
        buf[offset],
        buf[offset + 1],
        buf[offset + 2],
        buf[offset + 3],
    ]))
}

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// Load an IDX image/label file pair (the MNIST family layout).
pub fn load_idx(images_path: &Path, labels_path: &Path, classes: usize) -> Result<Dataset> {
    let ibuf = read_all(images_path)?;
    let magic = be_u32(&ibuf, 0, "image magic")?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("bad IDX image magic {:#010x}", magic),
        });
    }
    let n = be_u32(&ibuf, 4, "image count")? as usize;
    let h = be_u32(&ibuf, 8, "rows")? as usize;
    let w = be_u32(&ibuf, 12, "cols")? as usize;
    let expected = 16 + n * h * w;
    if ibuf.len() != expected {
        return Err(Error::Parse {
            offset: ibuf.len().min(expected) as u64,
            detail: format!(
                "image payload is {} bytes, header declares {}",
                ibuf.len() - 16,
                n * h * w
            ),
        });
    }

    let lbuf = read_all(labels_path)?;
    let lmagic = be_u32(&lbuf, 0, "label magic")?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            detail: format!("bad IDX label magic {:#010x}", lmagic),
        });
    }
    let ln = be_u32(&lbuf, 4, "label count")? as usize;
    if ln != n {
        return Err(Error::Parse {
            offset: 4,
            detail: format!("label count {} != image count {}", ln, n),
        });
    }
    if lbuf.len() != 8 + ln {
        return Err(Error::Parse {
            offset: lbuf.len().min(8 + ln) as u64,
            detail: format!("label payload is {} bytes, expected {}", lbuf.len() - 8, ln),
        });
    }

    let data: Vec<f64> = ibuf[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let mut labels = Vec::with_capacity(n);
    for (i, &b) in lbuf[8..].iter().enumerate() {
        let l = b as usize;
        if l >= classes {
            return Err(Error::Parse {
                offset: (8 + i) as u64,
                detail: format!("label {} out of range for {} classes (record {})", l, classes, i),
            });
        }
        labels.push(l);
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 1, h, w], data)?,
        labels,
        classes,
        source: format!("idx:{}", images_path.display()),
    })
}

/// Write a Dataset back out as an IDX pair (pixels quantized to u8).
pub fn write_idx(ds: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (c, h, w) = ds.image_shape();
    if c != 1 {
        return Err(Error::Config("IDX writer supports single-channel images".into()));
    }
    let n = ds.len();
    let mut ibuf = Vec::with_capacity(16 + n * h * w);
    ibuf.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    ibuf.extend_from_slice(&(n as u32).to_be_bytes());
    ibuf.extend_from_slice(&(h as u32).to_be_bytes());
    ibuf.extend_from_slice(&(w as u32).to_be_bytes());
    for &v in ds.images.data() {
        ibuf.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
    }
    std::fs::write(images_path, ibuf)?;

    let mut lbuf = Vec::with_capacity(8 + n);
    lbuf.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lbuf.extend_from_slice(&(n as u32).to_be_bytes());
    for &l in &ds.labels {
        lbuf.push(l as u8);
    }
    std::fs::write(labels_path, lbuf)?;
    Ok(())
}

const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;
const CIFAR_CLASSES: usize = 10;

/// Load one or more CIFAR-10 binary batch files (3073-byte records:
/// 1 label byte + 3072 channel-major pixels).
pub fn load_cifar_binary(paths: &[&Path]) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let buf = read_all(path)?;
        if buf.len() % CIFAR_RECORD != 0 {
            return Err(Error::Parse {
                offset: (buf.len() / CIFAR_RECORD * CIFAR_RECORD) as u64,
                detail: format!(
                    "{}: file length {} is not a multiple of {}-byte records",
                    path.display(),
                    buf.len(),
                    CIFAR_RECORD
                ),
            });
        }
        for (rec, chunk) in buf.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = chunk[0] as usize;
            if label >= CIFAR_CLASSES {
                return Err(Error::Parse {
                    offset: (rec * CIFAR_RECORD) as u64,
                    detail: format!("label {} out of range (record {})", label, rec),
                });
            }
            labels.push(label);
            data.extend(chunk[1..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?,
        labels,
        classes: CIFAR_CLASSES,
        source: "cifar-binary".into(),
    })
}

/// Load a dataset from disk. For IDX, `paths` is [images, labels]; for
/// CIFAR binary it is one or more batch files.
pub fn load_dataset(
    format: DataFormat,
    paths: &[&Path],
    classes: usize,
    limit: Option<usize>,
) -> Result<Dataset> {
    let ds = match format {
        DataFormat::Idx => {
            if paths.len() != 2 {
                return Err(Error::Config(
                    "IDX loading needs exactly an image path and a label path".into(),
                ));
            }
            load_idx(paths[0], paths[1], classes)?
        }
        DataFormat::CifarBinary => load_cifar_binary(paths)?,
    };
    ds.validate()?;
    Ok(match limit {
        Some(n) => ds.limit(n),
        None => ds,
    })
}

/// Smooth low-frequency template for class `c`: a distinct 2-D sinusoid
/// shifted into [0.15, 0.85] so noise rarely clips.
fn blob_template(c: usize, side: usize) -> Tensor {
    let mut t = Tensor::zeros(&[1, side, side]);
    let fx = 1.0 + (c % 3) as f64;
    let fy = 1.0 + (c / 3) as f64;
    let phase = c as f64 * 0.9;
    for i in 0..side {
        for j in 0..side {
            let u = i as f64 / side as f64;
            let v = j as f64 / side as f64;
            let val = 0.5
                + 0.35
                    * (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
            t.data_mut()[i * side + j] = val;
        }
    }
    t
}

/// Synthetic dataset: per-class smooth templates plus Gaussian pixel noise,
/// clipped to [0,1]. Deterministic given the seed.
pub fn synth_blobs(
    classes: usize,
    per_class: usize,
    image_side: usize,
    noise: f64,
    seed: u64,
) -> Dataset {
    assert!(classes > 0 && per_class > 0 && image_side > 0);
    let mut rng: ChaCha8Rng = rng_for(seed, "synth_blobs");
    let per = image_side * image_side;
    let mut data = Vec::with_capacity(classes * per_class * per);
    let mut labels = Vec::with_capacity(classes * per_class);
    let templates: Vec<Tensor> = (0..classes).map(|c| blob_template(c, image_side)).collect();
    for c in 0..classes {
        for _ in 0..per_class {
            for &v in templates[c].data() {
                let z = if noise == 0.0 {
                    0.0
                } else {
                    noise * standard_normal(&mut rng)
                };
                data.push((v + z).clamp(0.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset {
        images: Tensor::new(vec![classes * per_class, 1, image_side, image_side], data)
            .expect("synth shapes"),
        labels,
        classes,
        source: "synth_blobs".into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{kahan_sum, matmul_raw};

    #[test]
    fn idx_round_trip_and_limit() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("images.idx");
        let lp = dir.path().join("labels.idx");
        let ds = synth_blobs(2, 4, 6, 0.05, 7);
        write_idx(&ds, &ip, &lp).unwrap();
        let back = load_dataset(DataFormat::Idx, &[&ip, &lp], 2, None).unwrap();
        assert_eq!(back.len(), 8);
        assert_eq!(back.labels, ds.labels);
        // re-writing reproduces the same quantized bytes
        let ip2 = dir.path().join("images2.idx");
        let lp2 = dir.path().join("labels2.idx");
        write_idx(&back, &ip2, &lp2).unwrap();
        assert_eq!(std::fs::read(&ip).unwrap(), std::fs::read(&ip2).unwrap());
        assert_eq!(std::fs::read(&lp).unwrap(), std::fs::read(&lp2).unwrap());

        let limited = load_dataset(DataFormat::Idx, &[&ip, &lp], 2, Some(3)).unwrap();
        assert_eq!(limited.len(), 3);
        assert_eq!(limited.labels, ds.labels[..3]);
        assert_eq!(
            limited.images.data(),
            &back.images.data()[..3 * 36]
        );
    }

    #[test]
    fn idx_bad_magic_reports_offset_zero() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("bad.idx");
        let lp = dir.path().join("labels.idx");
        let mut buf = 0xDEADBEEFu32.to_be_bytes().to_vec();
        buf.extend_from_slice(&[0; 12]);
        std::fs::write(&ip, &buf).unwrap();
        std::fs::write(&lp, [0u8; 8]).unwrap();
        match load_dataset(DataFormat::Idx, &[&ip, &lp], 10, None) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected parse error, got {:?}", other.map(|d| d.len())),
        }
    }

    #[test]
    fn idx_truncated_payload_positions_error() {
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("trunc.idx");
        let lp = dir.path().join("labels.idx");
        let mut buf = IDX_IMAGE_MAGIC.to_be_bytes().to_vec();
        buf.extend_from_slice(&2u32.to_be_bytes());
        buf.extend_from_slice(&4u32.to_be_bytes());
        buf.extend_from_slice(&4u32.to_be_bytes());
        buf.extend_from_slice(&[0; 20]); // declares 32 pixel bytes
        std::fs::write(&ip, &buf).unwrap();
        std::fs::write(&lp, [0u8; 8]).unwrap();
        assert!(matches!(
            load_dataset(DataFormat::Idx, &[&ip, &lp], 10, None),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn cifar_label_out_of_range_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut buf = vec![0u8; CIFAR_RECORD]; // record 0 fine
        let mut bad = vec![17u8];
        bad.extend_from_slice(&[0u8; CIFAR_RECORD - 1]);
        buf.extend_from_slice(&bad);
        std::fs::write(&p, &buf).unwrap();
        match load_cifar_binary(&[&p]) {
            Err(Error::Parse { offset, detail }) => {
                assert_eq!(offset, CIFAR_RECORD as u64);
                assert!(detail.contains("record 1"), "{}", detail);
            }
            other => panic!("expected parse error, got {:?}", other.map(|d| d.len())),
        }
    }

    #[test]
    fn cifar_well_formed_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("batch.bin");
        let mut buf = Vec::new();
        for rec in 0..3u8 {
            buf.push(rec);
            buf.extend(std::iter::repeat(rec * 50).take(CIFAR_RECORD - 1));
        }
        std::fs::write(&p, &buf).unwrap();
        let ds = load_cifar_binary(&[&p]).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.image_shape(), (3, 32, 32));
        assert_eq!(ds.labels, vec![0, 1, 2]);
        assert!((ds.images.data()[3 * 3072 - 1] - 100.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn synth_blobs_zero_noise_has_one_image_per_class() {
        let ds = synth_blobs(2, 50, 8, 0.0, 1);
        assert_eq!(ds.len(), 100);
        let distinct: std::collections::HashSet<Vec<u64>> = (0..ds.len())
            .map(|i| ds.image(i).data().iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), 2);
    }

    #[test]
    fn synth_blobs_deterministic() {
        let a = synth_blobs(3, 10, 8, 0.05, 42);
        let b = synth_blobs(3, 10, 8, 0.05, 42);
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        let c = synth_blobs(3, 10, 8, 0.05, 43);
        assert_ne!(a.images, c.images);
    }

    /// Least-squares linear probe as the separability oracle: at noise 0.1
    /// the blob classes stay linearly separable.
    #[test]
    fn synth_blobs_linearly_separable_at_noise_point_one() {
        let classes = 3;
        let ds = synth_blobs(classes, 40, 8, 0.1, 9);
        let n = ds.len();
        let d = 64 + 1; // pixels + bias
        // normal equations with ridge damping
        let mut x = vec![0.0f64; n * d];
        for i in 0..n {
            x[i * d..i * d + 64].copy_from_slice(&ds.images.data()[i * 64..(i + 1) * 64]);
            x[i * d + 64] = 1.0;
        }
        let mut y = vec![0.0; n * classes];
        for i in 0..n {
            y[i * classes + ds.labels[i]] = 1.0;
        }
        let mut xt = vec![0.0f64; d * n];
        for i in 0..n {
            for j in 0..d {
                xt[j * n + i] = x[i * d + j];
            }
        }
        let mut xtx = matmul_raw(&xt, &x, d, n, d);
        for i in 0..d {
            xtx[i * d + i] += 1e-3;
        }
        let xty = matmul_raw(&xt, &y, d, n, classes);
        // Gaussian elimination for W in (XtX) W = XtY
        let mut a = xtx;
        let mut b = xty;
        for col in 0..d {
            let piv = (col..d)
                .max_by(|&p, &q| a[p * d + col].abs().partial_cmp(&a[q * d + col].abs()).unwrap())
                .unwrap();
            if piv != col {
                for j in 0..d {
                    a.swap(col * d + j, piv * d + j);
                }
                for j in 0..classes {
                    b.swap(col * classes + j, piv * classes + j);
                }
            }
            let pv = a[col * d + col];
            for r in 0..d {
                if r == col || a[r * d + col] == 0.0 {
                    continue;
                }
                let f = a[r * d + col] / pv;
                for j in 0..d {
                    a[r * d + j] -= f * a[col * d + j];
                }
                for j in 0..classes {
                    b[r * classes + j] -= f * b[col * classes + j];
                }
            }
        }
        let w: Vec<f64> = (0..d * classes)
            .map(|i| b[i] / a[(i / classes) * d + (i / classes)])
            .collect();
        let mut correct = 0;
        for i in 0..n {
            let mut scores = vec![0.0; classes];
            for c in 0..classes {
                scores[c] = kahan_sum((0..d).map(|j| x[i * d + j] * w[j * classes + c]));
            }
            let pred = scores
                .iter()
                .enumerate()
                .max_by(|p, q| p.1.partial_cmp(q.1).unwrap())
                .unwrap()
                .0;
            if pred == ds.labels[i] {
                correct += 1;
            }
        }
        let acc = correct as f64 / n as f64;
        assert!(acc >= 0.95, "linear probe accuracy {}", acc);
    }

    #[test]
    fn heldout_split_is_last_tenth() {
        let ds = synth_blobs(2, 25, 6, 0.02, 3);
        let (train, held) = ds.split_heldout();
        assert_eq!(train.len(), 45);
        assert_eq!(held.len(), 5);
        assert_eq!(held.labels, ds.labels[45..]);
        assert_eq!(held.images.data(), &ds.images.data()[45 * 36..]);
    }
}
