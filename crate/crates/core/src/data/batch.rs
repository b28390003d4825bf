use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::image::{load_image, resize_bilinear};
use super::manifest::{DatasetManifest, Domain, Label};
use crate::seeding::{stream_rng, Purpose};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Images `[N, side, side, 3]` in `[0, 1]`, optional one-hot labels `[N, 2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Option<Tensor>,
    pub domain: Domain,
}

impl Batch {
    pub fn new(images: Tensor, labels: Option<Tensor>, domain: Domain) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[3] != 3 {
            return Err(Error::InvalidArgument {
                op: "batch",
                reason: format!("images must be [N,H,W,3], got {:?}", images.shape()),
            });
        }
        if let Some(bad) = images.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument {
                op: "batch",
                reason: format!("pixel value {bad} outside [0, 1]"),
            });
        }
        if let Some(l) = &labels {
            if l.shape() != [images.shape()[0], Label::ALL.len()] {
                return Err(Error::InvalidArgument {
                    op: "batch",
                    reason: format!("labels {:?} do not match {} images", l.shape(), images.shape()[0]),
                });
            }
        }
        Ok(Self {
            images,
            labels,
            domain,
        })
    }

    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One-hot `[N, 2]` tensor for the given labels.
pub fn one_hot(labels: &[Label]) -> Result<Tensor> {
    let k = Label::ALL.len();
    let mut data = vec![0.0; labels.len() * k];
    for (row, label) in labels.iter().enumerate() {
        data[row * k + label.index()] = 1.0;
    }
    Ok(Tensor::new(&[labels.len(), k], data)?)
}

/// Visiting order for one epoch: a permutation keyed by `(seed, epoch)`.
pub fn batch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream_rng(seed, Purpose::Shuffle, epoch as u64));
    order
}

fn check_batch_size(batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument {
            op: "batches",
            reason: "batch_size must be >= 1".into(),
        });
    }
    Ok(())
}

/// Streams shuffled batches straight from disk, decoding each file on demand.
///
/// The final partial batch is emitted.
pub fn batches(
    manifest: &DatasetManifest,
    side: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
    with_labels: bool,
) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
    check_batch_size(batch_size)?;
    let order = batch_order(manifest.len(), seed, epoch);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |idx| {
        let decoded: Vec<Tensor> = idx
            .par_iter()
            .map(|&i| load_image(&manifest.entries[i].path, side))
            .collect::<Result<_>>()?;
        let pixels = decoded.into_iter().flat_map(Tensor::into_data).collect();
        let images = Tensor::new(&[idx.len(), side, side, 3], pixels)?;
        let labels = if with_labels {
            let l: Vec<Label> = idx.iter().map(|&i| manifest.entries[i].label).collect();
            Some(one_hot(&l)?)
        } else {
            None
        };
        Batch::new(images, labels, manifest.domain)
    }))
}

/// A decoded, in-memory copy of a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    domain: Domain,
    side: usize,
    pixels: Vec<f64>,
    labels: Vec<Label>,
}

impl LoadedDataset {
    /// Decodes every entry; decoding runs in parallel but order follows the manifest.
    pub fn load(manifest: &DatasetManifest, side: usize) -> Result<Self> {
        let decoded: Vec<Tensor> = manifest
            .entries
            .par_iter()
            .map(|e| load_image(&e.path, side))
            .collect::<Result<_>>()?;
        let pixels = decoded.into_iter().flat_map(Tensor::into_data).collect();
        let labels = manifest.entries.iter().map(|e| e.label).collect();
        Self::from_parts(manifest.domain, side, pixels, labels)
    }

    pub fn from_parts(domain: Domain, side: usize, pixels: Vec<f64>, labels: Vec<Label>) -> Result<Self> {
        if labels.is_empty() || pixels.len() != labels.len() * side * side * 3 {
            return Err(Error::InvalidArgument {
                op: "dataset",
                reason: format!(
                    "{} pixel values do not describe {} images of side {side}",
                    pixels.len(),
                    labels.len()
                ),
            });
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument {
                op: "dataset",
                reason: "pixel values must lie in [0, 1]".into(),
            });
        }
        Ok(Self {
            domain,
            side,
            pixels,
            labels,
        })
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let n = self.side * self.side * 3;
        &self.pixels[index * n..(index + 1) * n]
    }

    /// A new dataset holding the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let pixels = indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::from_parts(self.domain, self.side, pixels, labels)
    }

    /// Every image bilinearly resampled to `side x side`.
    pub fn resized(&self, side: usize) -> Result<Self> {
        let pixels = (0..self.len())
            .flat_map(|i| resize_bilinear(self.image(i), self.side, self.side, 3, side, side))
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        Self::from_parts(self.domain, side, pixels, self.labels.clone())
    }

    /// Gathers the given rows into one batch.
    pub fn gather(&self, indices: &[usize], with_labels: bool) -> Result<Batch> {
        let pixels = indices.iter().flat_map(|&i| self.image(i).iter().copied()).collect();
        let images = Tensor::new(&[indices.len(), self.side, self.side, 3], pixels)?;
        let labels = if with_labels {
            let l: Vec<Label> = indices.iter().map(|&i| self.labels[i]).collect();
            Some(one_hot(&l)?)
        } else {
            None
        };
        Batch::new(images, labels, self.domain)
    }

    /// Shuffled batches for one epoch, final partial batch included.
    pub fn batches(
        &self,
        batch_size: usize,
        seed: u64,
        epoch: usize,
        with_labels: bool,
    ) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
        check_batch_size(batch_size)?;
        let order = batch_order(self.len(), seed, epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
        Ok(chunks.into_iter().map(move |idx| self.gather(&idx, with_labels)))
    }

    /// Batches in stored order, for evaluation.
    pub fn sequential_batches(
        &self,
        batch_size: usize,
        with_labels: bool,
    ) -> Result<impl Iterator<Item = Result<Batch>> + '_> {
        check_batch_size(batch_size)?;
        let len = self.len();
        Ok((0..len)
            .step_by(batch_size)
            .map(move |start| {
                let idx: Vec<usize> = (start..(start + batch_size).min(len)).collect();
                self.gather(&idx, with_labels)
            }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n: usize) -> LoadedDataset {
        let side = 2;
        let pixels = (0..n * side * side * 3).map(|i| (i % 7) as f64 / 7.0).collect();
        let labels = (0..n).map(|i| Label::ALL[i % 2]).collect();
        LoadedDataset::from_parts(Domain::Source, side, pixels, labels).unwrap()
    }

    fn sizes(d: &LoadedDataset, batch: usize) -> Vec<usize> {
        d.batches(batch, 1, 0, true).unwrap().map(|b| b.unwrap().len()).collect()
    }

    #[test]
    fn partial_batches_are_emitted() {
        assert_eq!(sizes(&dataset(10), 16), vec![10]);
        assert_eq!(sizes(&dataset(33), 16), vec![16, 16, 1]);
        assert!(dataset(3).batches(0, 0, 0, true).is_err());
    }

    #[test]
    fn order_depends_on_epoch_and_is_reproducible() {
        let a = batch_order(50, 7, 0);
        assert_eq!(a, batch_order(50, 7, 0));
        assert_ne!(a, batch_order(50, 7, 1));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn labels_are_one_hot_and_optional() {
        let d = dataset(4);
        let b = d.gather(&[0, 1], true).unwrap();
        assert_eq!(b.labels.unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(d.gather(&[0, 1], false).unwrap().labels.is_none());
        let all: usize = d.sequential_batches(3, false).unwrap().map(|b| b.unwrap().len()).sum();
        assert_eq!(all, 4);
    }

    #[test]
    fn out_of_range_pixels_are_rejected() {
        let bad = Tensor::new(&[1, 1, 1, 3], vec![0.0, 1.5, 0.2]).unwrap();
        assert!(Batch::new(bad, None, Domain::Target).is_err());
        assert!(LoadedDataset::from_parts(Domain::Source, 1, vec![0.0, -0.1, 0.0], vec![Label::Healthy]).is_err());
    }
}
