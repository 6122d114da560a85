//! Dataset ingestion and batching: CIFAR binary files, desk-scale
//! subsetting/downscaling, synthetic datasets and deterministic batch
//! iteration.
//!
//! CIFAR-10 records are 3073 bytes (label byte + 3×1024 pixel bytes,
//! channel-planar R,G,B row-major); CIFAR-100 records are 3074 bytes
//! (coarse + fine label bytes + pixels). Synthetic datasets serialize to
//! the same record layout, so everything downstream of the loader is
//! format-agnostic.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 3073,
            CifarVariant::Cifar100 => 3074,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel standardization statistics, computed from a training split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

/// An in-memory image classification dataset, pixels in [0,1].
#[derive(Debug, Clone)]
pub struct ImageDataset {
    /// `[count, 3, res, res]` row-major.
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    pub resolution: usize,
    pub num_classes: usize,
    pub split: Split,
    pub stats: Option<ChannelStats>,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels_per_image(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    /// Per-channel mean/std over this split.
    pub fn compute_stats(&self) -> ChannelStats {
        let plane = self.resolution * self.resolution;
        let count = (self.len() * plane) as f64;
        let mut mean = [0.0f64; 3];
        let mut var = [0.0f64; 3];
        for i in 0..self.len() {
            let img = self.image(i);
            for c in 0..3 {
                for &v in &img[c * plane..(c + 1) * plane] {
                    mean[c] += v as f64;
                }
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for i in 0..self.len() {
            let img = self.image(i);
            for c in 0..3 {
                for &v in &img[c * plane..(c + 1) * plane] {
                    let d = v as f64 - mean[c];
                    var[c] += d * d;
                }
            }
        }
        let mut std = [0.0f32; 3];
        for c in 0..3 {
            std[c] = ((var[c] / count).sqrt() as f32).max(1e-6);
        }
        ChannelStats {
            mean: [mean[0] as f32, mean[1] as f32, mean[2] as f32],
            std,
        }
    }

    /// Normalized pixel buffer for one image (identity when no stats set).
    fn normalized_into(&self, i: usize, out: &mut Vec<f32>) {
        let plane = self.resolution * self.resolution;
        let img = self.image(i);
        match self.stats {
            Some(st) => {
                for c in 0..3 {
                    for &v in &img[c * plane..(c + 1) * plane] {
                        out.push((v - st.mean[c]) / st.std[c]);
                    }
                }
            }
            None => out.extend_from_slice(img),
        }
    }
}

/// Read one CIFAR binary file.
pub fn load_cifar_file(path: &Path, variant: CifarVariant, split: Split) -> Result<ImageDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let rec = variant.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Data(format!(
            "{}: size {} is not a multiple of record length {rec}",
            path.display(),
            bytes.len()
        )));
    }
    let count = bytes.len() / rec;
    let mut images = Vec::with_capacity(count * 3072);
    let mut labels = Vec::with_capacity(count);
    let label_offset = match variant {
        CifarVariant::Cifar10 => 0,
        CifarVariant::Cifar100 => 1, // fine label follows the coarse byte
    };
    for r in 0..count {
        let rec_bytes = &bytes[r * rec..(r + 1) * rec];
        let label = rec_bytes[label_offset] as u32;
        if label as usize >= variant.num_classes() {
            return Err(Error::Data(format!(
                "{}: record {r} label {label} out of range",
                path.display()
            )));
        }
        labels.push(label);
        let pix_start = label_offset + 1;
        images.extend(rec_bytes[pix_start..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok(ImageDataset {
        images,
        labels,
        resolution: 32,
        num_classes: variant.num_classes(),
        split,
        stats: None,
    })
}

/// Load the standard train/test file layout from a directory and attach
/// training-split statistics to both splits.
pub fn load_cifar_dir(dir: &Path, variant: CifarVariant) -> Result<(ImageDataset, ImageDataset)> {
    let (train_files, test_file): (Vec<String>, &str) = match variant {
        CifarVariant::Cifar10 => (
            (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            "test_batch.bin",
        ),
        CifarVariant::Cifar100 => (vec!["train.bin".into()], "test.bin"),
    };
    let mut train: Option<ImageDataset> = None;
    for f in &train_files {
        let part = load_cifar_file(&dir.join(f), variant, Split::Train)?;
        train = Some(match train {
            None => part,
            Some(mut acc) => {
                acc.images.extend(part.images);
                acc.labels.extend(part.labels);
                acc
            }
        });
    }
    let mut train = train.expect("at least one train file");
    let mut test = load_cifar_file(&dir.join(test_file), variant, Split::Test)?;
    let stats = train.compute_stats();
    train.stats = Some(stats);
    test.stats = Some(stats);
    Ok((train, test))
}

/// Serialize to the CIFAR record layout (pixels quantized to bytes).
pub fn write_cifar_file(ds: &ImageDataset, path: &Path, variant: CifarVariant) -> Result<()> {
    if ds.resolution != 32 {
        return Err(Error::Data(format!(
            "CIFAR layout requires 32x32 images, dataset is {0}x{0}",
            ds.resolution
        )));
    }
    let mut bytes = Vec::with_capacity(ds.len() * variant.record_len());
    for i in 0..ds.len() {
        if variant == CifarVariant::Cifar100 {
            bytes.push(0); // coarse label, unused here
        }
        bytes.push(ds.labels[i] as u8);
        for &v in ds.image(i) {
            bytes.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

/// Class-stratified subsample plus area-average downscaling.
pub fn make_desk_subset(
    ds: &ImageDataset,
    n: usize,
    resolution: usize,
    seed: u64,
) -> Result<ImageDataset> {
    if n > ds.len() {
        return Err(Error::Data(format!(
            "requested {n} samples from a split of {}",
            ds.len()
        )));
    }
    if resolution == 0 || ds.resolution % resolution != 0 {
        return Err(Error::Data(format!(
            "target resolution {resolution} must divide source {}",
            ds.resolution
        )));
    }
    // Per-class quotas: n / classes each, remainder to the lowest ids.
    let classes = ds.num_classes;
    let base = n / classes;
    let rem = n % classes;
    let mut selected = Vec::with_capacity(n);
    for c in 0..classes {
        let quota = base + usize::from(c < rem);
        if quota == 0 {
            continue;
        }
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c as u32).collect();
        if members.len() < quota {
            return Err(Error::Data(format!(
                "class {c} has only {} samples, need {quota}",
                members.len()
            )));
        }
        let mut rng = stream(seed, StreamTag::Data, c as u64);
        for i in (1..members.len()).rev() {
            let j = rng.random_range(0..=i);
            members.swap(i, j);
        }
        selected.extend(members.into_iter().take(quota));
    }
    selected.sort_unstable();

    let factor = ds.resolution / resolution;
    let src_plane = ds.resolution * ds.resolution;
    let dst_plane = resolution * resolution;
    let mut images = Vec::with_capacity(selected.len() * 3 * dst_plane);
    let mut labels = Vec::with_capacity(selected.len());
    for &i in &selected {
        let img = ds.image(i);
        for c in 0..3 {
            let plane = &img[c * src_plane..(c + 1) * src_plane];
            for oy in 0..resolution {
                for ox in 0..resolution {
                    let mut acc = 0.0f32;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += plane[(oy * factor + dy) * ds.resolution + ox * factor + dx];
                        }
                    }
                    images.push(acc / (factor * factor) as f32);
                }
            }
        }
        labels.push(ds.labels[i]);
    }
    Ok(ImageDataset {
        images,
        labels,
        resolution,
        num_classes: ds.num_classes,
        split: ds.split,
        stats: None,
    })
}

/// Gaussian-blob dataset: one bump location per class plus pixel noise.
/// Linearly separable in pixel space for small spread.
pub fn synth_blobs(
    num_classes: usize,
    per_class: usize,
    resolution: usize,
    spread: f32,
    seed: u64,
) -> Result<ImageDataset> {
    if spread < 0.0 {
        return Err(Error::InvalidArgument("spread must be >= 0".into()));
    }
    let plane = resolution * resolution;
    let mut rng = stream(seed, StreamTag::Data, 0);
    let noise = Normal::new(0.0f32, spread.max(f32::MIN_POSITIVE)).unwrap();
    let mut images = Vec::with_capacity(num_classes * per_class * 3 * plane);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    let sigma = resolution as f32 / 6.0;
    let radius = resolution as f32 / 3.0;
    let center = (resolution as f32 - 1.0) / 2.0;
    for c in 0..num_classes {
        let angle = std::f32::consts::TAU * c as f32 / num_classes as f32;
        let (cy, cx) = (center + radius * angle.sin(), center + radius * angle.cos());
        // Per-channel amplitudes distinguish classes sharing nearby bumps.
        let amps = [
            0.6 + 0.4 * ((c % 2) as f32),
            0.6 + 0.4 * (((c / 2) % 2) as f32),
            1.0,
        ];
        for _ in 0..per_class {
            for amp in amps {
                for y in 0..resolution {
                    for x in 0..resolution {
                        let d2 = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2);
                        let v = amp * (-d2 / (2.0 * sigma * sigma)).exp()
                            + if spread > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                        images.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(c as u32);
        }
    }
    Ok(ImageDataset {
        images,
        labels,
        resolution,
        num_classes,
        split: Split::Train,
        stats: None,
    })
}

/// Procedural texture dataset: class-specific oriented gratings and bump
/// pairs under random shift, contrast jitter and pixel noise. Harder than
/// [`synth_blobs`], intended as a CIFAR stand-in at desk scale.
pub fn synth_textures(
    num_classes: usize,
    per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<ImageDataset> {
    if num_classes == 0 || per_class == 0 || resolution == 0 {
        return Err(Error::InvalidArgument("empty texture dataset requested".into()));
    }
    let plane = resolution * resolution;
    let mut rng = stream(seed, StreamTag::Data, 1);
    let noise = Normal::new(0.0f32, 0.15).unwrap();
    let mut images = Vec::with_capacity(num_classes * per_class * 3 * plane);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    let max_shift = (resolution / 8).max(1) as i32;
    for c in 0..num_classes {
        let theta = std::f32::consts::PI * c as f32 / num_classes as f32;
        let freq = (2 + c % 3) as f32 * std::f32::consts::TAU / resolution as f32;
        let (dir_y, dir_x) = (theta.sin(), theta.cos());
        let bump_angle = std::f32::consts::TAU * ((c * 7 % num_classes) as f32 + 0.5)
            / num_classes as f32;
        let center = (resolution as f32 - 1.0) / 2.0;
        let br = resolution as f32 / 3.5;
        let (by, bx) = (center + br * bump_angle.sin(), center + br * bump_angle.cos());
        let sigma = resolution as f32 / 7.0;
        let chan_w = [
            0.4 + 0.6 * ((c % 3 == 0) as u8 as f32),
            0.4 + 0.6 * ((c % 3 == 1) as u8 as f32),
            0.4 + 0.6 * ((c % 3 == 2) as u8 as f32),
        ];
        for _ in 0..per_class {
            let sy = rng.random_range(-max_shift..=max_shift);
            let sx = rng.random_range(-max_shift..=max_shift);
            let contrast: f32 = rng.random_range(0.7..1.3);
            let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
            for cw in chan_w {
                for y in 0..resolution {
                    for x in 0..resolution {
                        let yy = y as f32 + sy as f32;
                        let xx = x as f32 + sx as f32;
                        let grating = 0.5 + 0.5 * ((dir_y * yy + dir_x * xx) * freq + phase).sin();
                        let d2 = (yy - by).powi(2) + (xx - bx).powi(2);
                        let bump = (-d2 / (2.0 * sigma * sigma)).exp();
                        let v = cw * contrast * (0.55 * grating + 0.45 * bump)
                            + noise.sample(&mut rng);
                        images.push(v.clamp(0.0, 1.0));
                    }
                }
            }
            labels.push(c as u32);
        }
    }
    Ok(ImageDataset {
        images,
        labels,
        resolution,
        num_classes,
        split: Split::Train,
        stats: None,
    })
}

/// Deterministic epoch shuffling recipe.
#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    pub seed: u64,
    pub batch_size: usize,
}

/// One normalized minibatch.
pub struct Batch {
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
    pub size: usize,
}

/// The index permutation for an epoch: a pure function of (seed, epoch).
pub fn epoch_permutation(count: usize, plan: &BatchPlan, epoch: usize) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..count).collect();
    let mut rng = stream(plan.seed, StreamTag::Shuffle, epoch as u64);
    for i in (1..count).rev() {
        let j = rng.random_range(0..=i);
        perm.swap(i, j);
    }
    perm
}

/// Shuffled minibatches for one epoch; the final partial batch is kept,
/// except that a lone trailing sample is merged into the previous batch.
pub fn iterate_batches(ds: &ImageDataset, plan: &BatchPlan, epoch: usize) -> Vec<Batch> {
    batches_from_order(ds, epoch_permutation(ds.len(), plan, epoch), plan.batch_size)
}

/// Unshuffled minibatches in dataset order (for evaluation).
pub fn eval_batches(ds: &ImageDataset, batch_size: usize) -> Vec<Batch> {
    batches_from_order(ds, (0..ds.len()).collect(), batch_size)
}

fn batches_from_order(ds: &ImageDataset, order: Vec<usize>, batch_size: usize) -> Vec<Batch> {
    assert!(batch_size >= 1);
    let mut bounds = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = (start + batch_size).min(order.len());
        if order.len() - end == 1 {
            end = order.len();
        }
        bounds.push((start, end));
        start = end;
    }
    bounds
        .into_iter()
        .map(|(s, e)| {
            let idx = &order[s..e];
            let mut images = Vec::with_capacity(idx.len() * ds.pixels_per_image());
            let mut labels = Vec::with_capacity(idx.len());
            for &i in idx {
                ds.normalized_into(i, &mut images);
                labels.push(ds.labels[i]);
            }
            Batch {
                images,
                labels,
                size: idx.len(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cifar_bytes(labels: &[u8], fill: u8) -> Vec<u8> {
        let mut out = Vec::new();
        for &l in labels {
            out.push(l);
            out.extend(std::iter::repeat_n(fill, 3072));
        }
        out
    }

    #[test]
    fn loads_label_and_scales_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        std::fs::write(&path, tiny_cifar_bytes(&[5, 0], 255)).unwrap();
        let ds = load_cifar_file(&path, CifarVariant::Cifar10, Split::Train).unwrap();
        assert_eq!(ds.labels, vec![5, 0]);
        assert!(ds.image(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rejects_truncated_file_and_bad_label() {
        let dir = tempfile::tempdir().unwrap();
        let trunc = dir.path().join("trunc.bin");
        std::fs::write(&trunc, vec![0u8; 3072]).unwrap();
        assert!(load_cifar_file(&trunc, CifarVariant::Cifar10, Split::Train).is_err());
        let bad = dir.path().join("bad.bin");
        std::fs::write(&bad, tiny_cifar_bytes(&[17], 0)).unwrap();
        assert!(load_cifar_file(&bad, CifarVariant::Cifar10, Split::Train).is_err());
    }

    #[test]
    fn cifar_round_trip_through_record_layout() {
        let ds = synth_textures(10, 3, 32, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("synth.bin");
        write_cifar_file(&ds, &path, CifarVariant::Cifar10).unwrap();
        let back = load_cifar_file(&path, CifarVariant::Cifar10, Split::Train).unwrap();
        assert_eq!(back.labels, ds.labels);
        // Quantization to bytes bounds the reconstruction error.
        for (a, b) in ds.images.iter().zip(&back.images) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn desk_subset_is_stratified_and_deterministic() {
        let ds = synth_textures(10, 30, 32, 4).unwrap();
        let sub = make_desk_subset(&ds, 100, 8, 11).unwrap();
        assert_eq!(sub.len(), 100);
        assert_eq!(sub.resolution, 8);
        for c in 0..10u32 {
            assert_eq!(sub.labels.iter().filter(|&&l| l == c).count(), 10);
        }
        let sub2 = make_desk_subset(&ds, 100, 8, 11).unwrap();
        assert_eq!(sub.images, sub2.images);
        assert_eq!(sub.labels, sub2.labels);
        let sub3 = make_desk_subset(&ds, 100, 8, 12).unwrap();
        assert_ne!(sub.images, sub3.images);
    }

    #[test]
    fn identity_rescale_is_bitwise() {
        let ds = synth_blobs(4, 5, 8, 0.05, 3).unwrap();
        let sub = make_desk_subset(&ds, 20, 8, 1).unwrap();
        assert_eq!(sub.images, ds.images);
    }

    #[test]
    fn downscale_of_constant_image_is_constant() {
        let plane = 32 * 32;
        let ds = ImageDataset {
            images: vec![0.42; 3 * plane],
            labels: vec![0],
            resolution: 32,
            num_classes: 1,
            split: Split::Train,
            stats: None,
        };
        let sub = make_desk_subset(&ds, 1, 8, 0).unwrap();
        for v in &sub.images {
            assert!((v - 0.42).abs() < 1e-6);
        }
    }

    #[test]
    fn blobs_zero_spread_has_no_within_class_variance() {
        let ds = synth_blobs(4, 3, 8, 0.0, 5).unwrap();
        let p = 3 * 8 * 8;
        for c in 0..4 {
            let first = ds.image(c * 3);
            for s in 1..3 {
                assert_eq!(ds.image(c * 3 + s), first);
            }
        }
        assert_eq!(ds.images.len(), 4 * 3 * p);
    }

    #[test]
    fn blobs_same_seed_bitwise_identical() {
        let a = synth_blobs(4, 10, 8, 0.05, 7).unwrap();
        let b = synth_blobs(4, 10, 8, 0.05, 7).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
    }

    #[test]
    fn batch_sizes_and_coverage() {
        let ds = synth_blobs(10, 30, 4, 0.01, 2).unwrap();
        assert_eq!(ds.len(), 300);
        let plan = BatchPlan { seed: 1, batch_size: 128 };
        let batches = iterate_batches(&ds, &plan, 0);
        let sizes: Vec<usize> = batches.iter().map(|b| b.size).collect();
        assert_eq!(sizes, vec![128, 128, 44]);
        let mut label_count = vec![0usize; 10];
        for b in &batches {
            for &l in &b.labels {
                label_count[l as usize] += 1;
            }
        }
        assert!(label_count.iter().all(|&c| c == 30));
    }

    #[test]
    fn lone_trailing_sample_merges() {
        let ds = synth_blobs(1, 129, 4, 0.0, 2).unwrap();
        let plan = BatchPlan { seed: 1, batch_size: 128 };
        let batches = iterate_batches(&ds, &plan, 0);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].size, 129);
    }

    #[test]
    fn epochs_shuffle_differently_but_reproducibly() {
        let plan = BatchPlan { seed: 5, batch_size: 32 };
        let p0 = epoch_permutation(100, &plan, 0);
        let p1 = epoch_permutation(100, &plan, 1);
        assert_ne!(p0[..10], p1[..10]);
        assert_eq!(p0, epoch_permutation(100, &plan, 0));
        let mut sorted = p0.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn stats_from_train_apply_to_test() {
        let mut train = synth_textures(4, 20, 8, 3).unwrap();
        let mut test = synth_textures(4, 10, 8, 4).unwrap();
        let st = train.compute_stats();
        train.stats = Some(st);
        test.stats = Some(st);
        let b = eval_batches(&train, 16);
        // Normalized training data is near zero mean.
        let total: f32 = b.iter().flat_map(|x| &x.images).sum();
        let n: usize = b.iter().map(|x| x.images.len()).sum();
        assert!((total / n as f32).abs() < 0.05);
        assert_eq!(test.stats.unwrap(), st);
    }
}
