//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "KIPCKPT\0"
//! header     u32 length, then that many bytes of UTF-8 JSON
//! tensors    u32 count, then per tensor:
//!              u16 name length, name bytes (UTF-8)
//!              u8 rank, rank × u64 dims
//!              product(dims) × f32 values
//! ```
//!
//! Tensor values are stored as f32. A [`Checkpoint`] holds them as f32 too,
//! so writing and reading back reproduces it bit for bit.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::distill::{AdamState, DistillConfig, Snapshot, SupportSet};
use crate::error::{Error, Result};
use crate::images::{ImageSet, Preprocessing};
use crate::kernels::KernelSpec;
use crate::krr::LabelMatrix;
use crate::preprocess::ZcaTransform;

pub const MAGIC: &[u8; 8] = b"KIPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
/// Upper bound on the JSON header, far above anything this crate writes.
pub const MAX_HEADER: usize = 1 << 20;
pub const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub spec: KernelSpec,
    pub config: DistillConfig,
    pub preprocessing: Preprocessing,
    pub step: u64,
    /// Train loss at this checkpoint, absent for the initial one.
    pub loss: Option<f64>,
    pub train_labels: bool,
    pub adam_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: &str, dims: Vec<usize>, values: impl IntoIterator<Item = f64>) -> Self {
        let data: Vec<f32> = values.into_iter().map(|v| v as f32).collect();
        debug_assert_eq!(data.len(), dims.iter().product::<usize>());
        Tensor {
            name: name.to_string(),
            dims,
            data,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    fn matrix(&self) -> Result<DMatrix<f64>> {
        match self.dims[..] {
            [r, c] => Ok(DMatrix::from_row_iterator(r, c, self.data.iter().map(|&v| v as f64))),
            _ => Err(Error::Checkpoint(format!("tensor {} is not a matrix", self.name))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: Vec<Tensor>,
}

fn row_major(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    (0..m.nrows()).flat_map(move |i| (0..m.ncols()).map(move |j| m[(i, j)]))
}

impl Checkpoint {
    pub fn new(spec: &KernelSpec, config: &DistillConfig, snapshot: &Snapshot, zca: Option<&ZcaTransform>) -> Self {
        let s = &snapshot.support;
        let (h, w, c) = s.images.shape();
        let n = s.len();
        let k = s.labels.classes();
        let img_dims = vec![n, h, w, c];
        let opt = &s.optimizer;
        let mut tensors = vec![
            Tensor::new("images", img_dims.clone(), s.images.pixels().iter().copied()),
            Tensor::new("labels", vec![n, k], row_major(s.labels.values())),
            Tensor::new("adam_m_images", img_dims.clone(), opt.m_images.iter().copied()),
            Tensor::new("adam_v_images", img_dims, opt.v_images.iter().copied()),
            Tensor::new("adam_m_labels", vec![n, k], row_major(&opt.m_labels)),
            Tensor::new("adam_v_labels", vec![n, k], row_major(&opt.v_labels)),
        ];
        if let Some(t) = zca {
            let d = t.dim();
            tensors.push(Tensor::new("zca_mean", vec![d], t.feature_mean.iter().copied()));
            tensors.push(Tensor::new("zca_std", vec![d], t.feature_std.iter().copied()));
            tensors.push(Tensor::new("zca_eigenvalues", vec![d], t.eigenvalues.iter().copied()));
            tensors.push(Tensor::new("zca_whitening", vec![d, d], row_major(&t.whitening)));
        }
        Checkpoint {
            header: Header {
                version: FORMAT_VERSION,
                spec: *spec,
                config: config.clone(),
                preprocessing: s.images.tag(),
                step: snapshot.step as u64,
                loss: Some(snapshot.loss).filter(|l| l.is_finite()),
                train_labels: s.train_labels,
                adam_step: opt.step,
            },
            tensors,
        }
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
    }

    /// The support set, with optimizer state, widened back to f64.
    pub fn support(&self) -> Result<SupportSet> {
        let images = self.tensor("images")?;
        let [n, h, w, c] = images.dims[..] else {
            return Err(Error::Checkpoint("images tensor must have rank 4".into()));
        };
        let images = ImageSet::new(n, h, w, c, images.to_f64(), self.header.preprocessing)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let labels = self.tensor("labels")?.matrix()?;
        if labels.nrows() != n {
            return Err(Error::Checkpoint(format!("{} label rows for {n} images", labels.nrows())));
        }
        let k = labels.ncols();
        let labels = LabelMatrix::from_matrix(labels).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut support = SupportSet::new(images, labels, self.header.train_labels)?;
        let like = |name: &str, dims: &[usize]| -> Result<&Tensor> {
            let t = self.tensor(name)?;
            if t.dims != dims {
                return Err(Error::Checkpoint(format!("tensor {name} has dims {:?}, expected {dims:?}", t.dims)));
            }
            Ok(t)
        };
        let img_dims = [n, h, w, c];
        support.optimizer = AdamState {
            step: self.header.adam_step,
            m_images: like("adam_m_images", &img_dims)?.to_f64(),
            v_images: like("adam_v_images", &img_dims)?.to_f64(),
            m_labels: like("adam_m_labels", &[n, k])?.matrix()?,
            v_labels: like("adam_v_labels", &[n, k])?.matrix()?,
        };
        Ok(support)
    }

    /// The whitening transform the support was trained under, if any.
    pub fn zca(&self) -> Result<Option<ZcaTransform>> {
        let Preprocessing::Zca { lambda } = self.header.preprocessing else {
            return Ok(None);
        };
        let whitening = self.tensor("zca_whitening")?.matrix()?;
        let d = whitening.nrows();
        let vector = |name: &str| -> Result<Vec<f64>> {
            let t = self.tensor(name)?;
            if t.dims != [d] {
                return Err(Error::Checkpoint(format!("tensor {name} has dims {:?}, expected [{d}]", t.dims)));
            }
            Ok(t.to_f64())
        };
        if whitening.ncols() != d {
            return Err(Error::Checkpoint("whitening matrix is not square".into()));
        }
        Ok(Some(ZcaTransform {
            lambda,
            feature_mean: vector("zca_mean")?,
            feature_std: vector("zca_std")?,
            eigenvalues: vector("zca_eigenvalues")?,
            whitening,
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + header.len() + self.tensors.iter().map(|t| 4 * t.data.len() + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let header_len = r.u32()? as usize;
        if header_len > MAX_HEADER {
            return Err(Error::Checkpoint(format!("header of {header_len} bytes is too large")));
        }
        let header: Header = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", header.version)));
        }
        let count = r.u32()? as usize;
        let mut tensors: Vec<Tensor> = Vec::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            if tensors.iter().any(|t| t.name == name) {
                return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
            }
            let rank = r.take(1)?[0] as usize;
            if rank > MAX_RANK {
                return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
            }
            let mut dims = Vec::with_capacity(rank);
            let mut len = 1usize;
            for _ in 0..rank {
                let d = usize::try_from(r.u64()?).map_err(|_| Error::Checkpoint("dimension overflows".into()))?;
                len = len
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {name} size overflows")))?;
                dims.push(d);
            }
            let bytes_len = len
                .checked_mul(4)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} size overflows")))?;
            let raw = r.take(bytes_len)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic_blobs;
    use crate::distill::{init_support, kip_train};
    use crate::preprocess::{zca_apply, zca_fit};
    use proptest::prelude::*;

    fn bits(c: &Checkpoint) -> Vec<Vec<u32>> {
        c.tensors.iter().map(|t| t.data.iter().map(|v| v.to_bits()).collect()).collect()
    }

    fn trained() -> (Checkpoint, ZcaTransform) {
        let data = synthetic_blobs(3, 10, (3, 3, 1), 3.0, 1).unwrap();
        let zca = zca_fit(&data.images, 0.1).unwrap();
        let data = data.with_images(zca_apply(&zca, &data.images).unwrap());
        let support = init_support(&data, 2, 0).unwrap();
        let support = SupportSet { train_labels: true, ..support };
        let cfg = DistillConfig {
            steps: 3,
            target_batch_size: 8,
            train_labels: true,
            kernel_pool: vec![KernelSpec::fc(2)],
            checkpoint_every: 3,
            ..DistillConfig::default()
        };
        let snaps = kip_train(&support, &data, &cfg).unwrap();
        (Checkpoint::new(&cfg.kernel_pool[0], &cfg, snaps.last().unwrap(), Some(&zca)), zca)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (ckpt, _) = trained();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
        assert_eq!(back.header, ckpt.header);
        assert_eq!(bits(&back), bits(&ckpt));
        assert_eq!(back.to_bytes(), ckpt.to_bytes());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.kip");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn support_and_zca_survive_at_single_precision() {
        let (ckpt, zca) = trained();
        let s = ckpt.support().unwrap();
        assert_eq!(s.len(), 6);
        assert_eq!(s.optimizer.step, 3);
        assert!(s.train_labels);
        assert_eq!(s.images.tag(), Preprocessing::Zca { lambda: 0.1 });
        let back = ckpt.zca().unwrap().unwrap();
        for (a, b) in back.whitening.iter().zip(zca.whitening.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
        // a second save of the restored state reproduces the file
        let again = Checkpoint::new(&ckpt.header.spec, &ckpt.header.config, &Snapshot { step: 3, loss: ckpt.header.loss.unwrap(), support: s }, Some(&back));
        assert_eq!(again.to_bytes(), ckpt.to_bytes());
    }

    #[test]
    fn layout_matches_the_documented_format() {
        let (ckpt, _) = trained();
        let bytes = ckpt.to_bytes();
        assert_eq!(&bytes[..8], b"KIPCKPT\0");
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
        assert_eq!(header["version"], 1);
        let count = u32::from_le_bytes(bytes[12 + hlen..16 + hlen].try_into().unwrap());
        assert_eq!(count, 10);
        let at = 16 + hlen;
        assert_eq!(u16::from_le_bytes(bytes[at..at + 2].try_into().unwrap()), 6);
        assert_eq!(&bytes[at + 2..at + 8], b"images");
        assert_eq!(bytes[at + 8], 4);
        let first = u64::from_le_bytes(bytes[at + 9..at + 17].try_into().unwrap());
        assert_eq!(first, 6);
        let v = f32::from_le_bytes(bytes[at + 41..at + 45].try_into().unwrap());
        assert_eq!(v, ckpt.tensors[0].data[0]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let (ckpt, _) = trained();
        let good = ckpt.to_bytes();
        for cut in [0, 7, 11, 40, good.len() - 1] {
            assert!(matches!(Checkpoint::from_bytes(&good[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut extra = good.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic).is_err());
        let text = String::from_utf8_lossy(&good[12..12 + 20]).to_string();
        assert!(text.starts_with("{\"version\":1"), "{text}");
        let mut version = good.clone();
        version[12 + 11] = b'2';
        assert!(matches!(Checkpoint::from_bytes(&version), Err(Error::Checkpoint(m)) if m.contains("version")));
    }

    #[test]
    fn inconsistent_tensors_fail_on_use() {
        let (mut ckpt, _) = trained();
        ckpt.tensors.retain(|t| t.name != "labels");
        assert!(ckpt.support().is_err());
        let (mut ckpt, _) = trained();
        ckpt.tensors[2].dims = vec![1, 54];
        assert!(ckpt.support().is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = Checkpoint::from_bytes(&bytes);
        }

        #[test]
        fn arbitrary_tensors_round_trip(
            dims in proptest::collection::vec(0usize..4, 0..4),
            seed in any::<u32>(),
            step in any::<u64>(),
        ) {
            let len: usize = dims.iter().product();
            let values = (0..len).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32)) as f64);
            let (mut ckpt, _) = trained();
            ckpt.header.step = step;
            ckpt.tensors.push(Tensor::new("extra", dims, values));
            let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
            prop_assert_eq!(bits(&back), bits(&ckpt));
            prop_assert_eq!(back.header, ckpt.header);
        }
    }
}
