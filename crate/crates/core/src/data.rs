//! Dataset directories and deterministic mini-batching.
//!
//! Layout: `<root>/<class_name>/*.ppm|*.pgm`. Class indices follow the
//! lexicographic order of the subdirectory names.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image;
use crate::parallel;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<(PathBuf, usize)>,
    pub class_names: Vec<String>,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm") || e.eq_ignore_ascii_case("pgm"))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

impl Dataset {
    pub fn load_dir(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Data(format!("{} is not a directory", root.display())));
        }
        let mut class_names = Vec::new();
        let mut samples = Vec::new();
        for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
            let name = dir
                .file_name()
                .and_then(|n| n.to_str())
                .ok_or_else(|| Error::Data(format!("class directory {} is not valid UTF-8", dir.display())))?
                .to_string();
            let class = class_names.len();
            let before = samples.len();
            samples.extend(
                sorted_entries(&dir)?
                    .into_iter()
                    .filter(|p| p.is_file() && is_image(p))
                    .map(|p| (p, class)),
            );
            if samples.len() == before {
                return Err(Error::Data(format!("class directory {} holds no .ppm/.pgm images", dir.display())));
            }
            class_names.push(name);
        }
        if class_names.is_empty() {
            return Err(Error::Data(format!("{} contains no class directories", root.display())));
        }
        Ok(Dataset { samples, class_names })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|&(_, c)| c).collect()
    }

    /// Decodes, resizes and scales every image once.
    pub fn preprocess<F: Scalar>(&self, height: usize, width: usize) -> Result<ImageSet<F>> {
        let paths: Vec<&Path> = self.samples.iter().map(|(p, _)| p.as_path()).collect();
        let images = parallel::map(paths, |p| image::preprocess(p, height, width))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageSet {
            images,
            labels: self.labels(),
            num_classes: self.num_classes(),
        })
    }
}

/// Preprocessed `[H, W, 3]` images in [0, 1] with their labels.
#[derive(Debug, Clone)]
pub struct ImageSet<F: Scalar = f32> {
    pub images: Vec<Tensor<F>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl<F: Scalar> ImageSet<F> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Stacks the given samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> Result<Batch<F>> {
        let first = self
            .images
            .first()
            .ok_or_else(|| Error::Data("empty image set".into()))?;
        let k = self.num_classes;
        let mut pixels = Vec::with_capacity(indices.len() * first.len());
        let mut onehot = vec![F::zero(); indices.len() * k];
        for (row, &i) in indices.iter().enumerate() {
            let img = self.images.get(i).ok_or_else(|| {
                Error::Index(format!("sample index {i} out of range for {} samples", self.len()))
            })?;
            if img.shape() != first.shape() {
                return Err(Error::size(format!(
                    "sample {i} has shape {:?}, expected {:?}",
                    img.shape(),
                    first.shape()
                )));
            }
            pixels.extend_from_slice(img.data());
            let label = self.labels[i];
            if label >= k {
                return Err(Error::Label(format!("label {label} outside [0, {k})")));
            }
            onehot[row * k + label] = F::one();
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(first.shape());
        Ok(Batch {
            images: Tensor::from_vec(&shape, pixels)?,
            onehot: Tensor::from_vec(&[indices.len(), k], onehot)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct Batch<F: Scalar = f32> {
    /// `[N, H, W, 3]`, values in [0, 1].
    pub images: Tensor<F>,
    /// `[N, K]`.
    pub onehot: Tensor<F>,
    pub labels: Vec<usize>,
}

/// Splits `indices` into chunks of `batch_size`, optionally after a seeded
/// shuffle. The final chunk may be smaller.
pub fn batch_indices(indices: &[usize], batch_size: usize, shuffle: bool, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    let mut order = indices.to_vec();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn make_batches<F: Scalar>(
    set: &ImageSet<F>,
    indices: &[usize],
    batch_size: usize,
    shuffle: bool,
    seed: u64,
) -> Result<Vec<Batch<F>>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= set.len()) {
        return Err(Error::Index(format!("sample index {bad} out of range for {} samples", set.len())));
    }
    batch_indices(indices, batch_size, shuffle, seed)?
        .iter()
        .map(|chunk| set.batch(chunk))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_set(n: usize) -> ImageSet<f32> {
        ImageSet {
            images: (0..n).map(|i| Tensor::full(&[2, 2, 3], i as f32 / n as f32).unwrap()).collect(),
            labels: (0..n).map(|i| i % 2).collect(),
            num_classes: 2,
        }
    }

    #[test]
    fn chunk_sizes() {
        let idx: Vec<usize> = (0..33).collect();
        let sizes: Vec<usize> = batch_indices(&idx, 16, true, 5).unwrap().iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![16, 16, 1]);
    }

    #[test]
    fn unshuffled_order_is_kept() {
        let idx = [4, 2, 7, 1, 0];
        assert_eq!(batch_indices(&idx, 2, false, 0).unwrap(), vec![vec![4, 2], vec![7, 1], vec![0]]);
    }

    #[test]
    fn shuffle_is_seeded() {
        let idx: Vec<usize> = (0..50).collect();
        let a = batch_indices(&idx, 8, true, 11).unwrap();
        assert_eq!(a, batch_indices(&idx, 8, true, 11).unwrap());
        assert_ne!(a, batch_indices(&idx, 8, true, 12).unwrap());
        let mut flat: Vec<usize> = a.concat();
        flat.sort();
        assert_eq!(flat, idx);
    }

    #[test]
    fn batches_stack_images_and_onehots() {
        let set = toy_set(5);
        let batches = make_batches(&set, &[0, 1, 2], 2, false, 0).unwrap();
        assert_eq!(batches[0].images.shape(), &[2, 2, 2, 3]);
        assert_eq!(batches[0].onehot.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(batches[1].labels, vec![0]);
    }

    #[test]
    fn bad_index() {
        let set = toy_set(3);
        assert!(matches!(make_batches(&set, &[0, 3], 2, false, 0), Err(Error::Index(_))));
    }

    #[test]
    fn directory_layout() {
        let dir = tempfile::tempdir().unwrap();
        for (class, files) in [("b_second", 2), ("a_first", 1)] {
            let d = dir.path().join(class);
            fs::create_dir(&d).unwrap();
            for i in 0..files {
                image::write_pgm(&d.join(format!("{i}.pgm")), 2, 2, &[0, 51, 102, 255]).unwrap();
            }
            fs::write(d.join("notes.txt"), "ignored").unwrap();
        }
        let ds = Dataset::load_dir(dir.path()).unwrap();
        assert_eq!(ds.class_names, vec!["a_first", "b_second"]);
        assert_eq!(ds.labels(), vec![0, 1, 1]);
        let set: ImageSet<f32> = ds.preprocess(4, 4).unwrap();
        assert!(set.images.iter().all(|t| t.shape() == [4, 4, 3]));
        assert!(set.images.iter().flat_map(|t| t.data()).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn empty_directory_is_data_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load_dir(dir.path()), Err(Error::Data(_))));
    }
}
