//! Image ↔ patch conversion and random patch masking.
//!
//! Images are `[C, H, W]` tensors. A patch is flattened channel-major,
//! i.e. element `c·s·s + dy·s + dx`, and patches are ordered raster-wise
//! over the patch grid.

use rand::seq::SliceRandom;

use crate::error::{MugError, Result};
use crate::rng::{self, stream};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence<T> {
    /// `[N, C·s·s]`
    pub patches: Tensor<T>,
    pub patch_size: usize,
}

impl<T: Real> PatchSequence<T> {
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.cols()
    }
}

fn image_dims<T: Real>(image: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(MugError::Shape(format!("expected a [C, H, W] image, got {s:?}"))),
    }
}

pub fn patchify<T: Real>(image: &Tensor<T>, patch_size: usize) -> Result<PatchSequence<T>> {
    let (c, h, w) = image_dims(image)?;
    let s = patch_size;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(MugError::Config(format!(
            "image {h}×{w} is not divisible into {s}×{s} patches"
        )));
    }
    let (gh, gw) = (h / s, w / s);
    let p = c * s * s;
    let src = image.data();
    let mut out = Vec::with_capacity(gh * gw * p);
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..s {
                    let row = ch * h * w + (py * s + dy) * w + px * s;
                    out.extend_from_slice(&src[row..row + s]);
                }
            }
        }
    }
    Ok(PatchSequence {
        patches: Tensor::new(vec![gh * gw, p], out)?,
        patch_size: s,
    })
}

pub fn unpatchify<T: Real>(seq: &PatchSequence<T>, c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = seq.patch_size;
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(MugError::Config(format!(
            "image {h}×{w} is not divisible into {s}×{s} patches"
        )));
    }
    let (gh, gw) = (h / s, w / s);
    if seq.patches.shape() != [gh * gw, c * s * s] {
        return Err(MugError::Shape(format!(
            "patches {:?} inconsistent with image [{c}, {h}, {w}] and patch size {s}",
            seq.patches.shape()
        )));
    }
    let mut out = vec![T::zero(); c * h * w];
    let src = seq.patches.data();
    let mut k = 0;
    for py in 0..gh {
        for px in 0..gw {
            for ch in 0..c {
                for dy in 0..s {
                    let row = ch * h * w + (py * s + dy) * w + px * s;
                    out[row..row + s].copy_from_slice(&src[k..k + s]);
                    k += s;
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// Per-patch standardization (`(x − mean) / sqrt(var + 1e-6)` within each
/// patch), the optional normalized-pixel reconstruction target.
pub fn normalize_patches<T: Real>(patches: &Tensor<T>) -> Tensor<T> {
    let (m, n) = patches.dims2();
    let mut out = patches.clone();
    let nf = T::from_usize(n).unwrap();
    for i in 0..m {
        let row = &mut out.data_mut()[i * n..(i + 1) * n];
        let mean = row.iter().copied().sum::<T>() / nf;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
        let inv = T::one() / (var + T::lit(1e-6)).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Visibility flags per patch (`true` = seen by the encoder).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskSpec {
    pub keep: Vec<bool>,
    /// Requested mask ratio in thousandths (kept integral so `Eq` holds).
    ratio_milli: u32,
    /// Number of masked patches.
    pub omega: usize,
}

impl MaskSpec {
    pub fn from_keep(keep: Vec<bool>) -> Result<Self> {
        let n = keep.len();
        let omega = keep.iter().filter(|&&k| !k).count();
        if n == 0 || omega == n {
            return Err(MugError::Invalid("mask leaves no visible patch".into()));
        }
        Ok(Self {
            keep,
            ratio_milli: ((omega as f64 / n as f64) * 1000.0).round() as u32,
            omega,
        })
    }

    /// Bypass mask: every patch visible.
    pub fn all_visible(n: usize) -> Self {
        Self {
            keep: vec![true; n],
            ratio_milli: 0,
            omega: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        f64::from(self.ratio_milli) / 1000.0
    }

    pub fn visible_count(&self) -> usize {
        self.len() - self.omega
    }

    pub fn masked(&self) -> Vec<bool> {
        self.keep.iter().map(|&k| !k).collect()
    }

    pub fn visible_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.keep[i]).collect()
    }
}

/// `round(ratio·n)`, rejecting ratios that would mask nothing or everything.
pub fn masked_count(n_patches: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(MugError::Config(format!("mask ratio {ratio} must lie in (0, 1)")));
    }
    let omega = (ratio * n_patches as f64).round() as usize;
    if omega == 0 || omega >= n_patches {
        return Err(MugError::Config(format!(
            "mask ratio {ratio} on {n_patches} patches masks {omega}; need between 1 and {}",
            n_patches.saturating_sub(1)
        )));
    }
    Ok(omega)
}

/// Masks exactly `round(ratio·n)` patches chosen by a seeded shuffle.
pub fn sample_mask(n_patches: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    let omega = masked_count(n_patches, ratio)?;
    let mut order: Vec<usize> = (0..n_patches).collect();
    order.shuffle(&mut rng::rng_for(&[stream::MASK, seed]));
    let mut keep = vec![true; n_patches];
    for &i in &order[..omega] {
        keep[i] = false;
    }
    Ok(MaskSpec {
        keep,
        ratio_milli: (ratio * 1000.0).round() as u32,
        omega,
    })
}

/// Mask seed for one sample; `epoch_key` distinguishes repeated visits.
pub fn mask_seed(global_seed: u64, sample_key: u64, epoch_key: u64) -> u64 {
    rng::mix(&[global_seed, sample_key, epoch_key])
}

/// Gathers visible patches in ascending original order.
pub fn apply_mask<T: Real>(seq: &PatchSequence<T>, mask: &MaskSpec) -> Result<(Tensor<T>, Vec<usize>)> {
    if mask.len() != seq.len() {
        return Err(MugError::Shape(format!(
            "mask has {} entries for {} patches",
            mask.len(),
            seq.len()
        )));
    }
    let indices = mask.visible_indices();
    let p = seq.patch_dim();
    let mut data = Vec::with_capacity(indices.len() * p);
    for &i in &indices {
        data.extend_from_slice(seq.patches.row(i));
    }
    Ok((Tensor::new(vec![indices.len(), p], data)?, indices))
}

/// Zeroes masked patches of an image (display form of `M ⊙ x`).
pub fn masked_image<T: Real>(image: &Tensor<T>, patch_size: usize, mask: &MaskSpec) -> Result<Tensor<T>> {
    let (c, h, w) = image_dims(image)?;
    let mut seq = patchify(image, patch_size)?;
    let p = seq.patch_dim();
    for (i, &k) in mask.keep.iter().enumerate() {
        if !k {
            seq.patches.data_mut()[i * p..(i + 1) * p].fill(T::zero());
        }
    }
    unpatchify(&seq, c, h, w)
}

/// Seeded crop of a random sub-window (area fraction in `[min_area, 1]`)
/// resized back to the input size by nearest-neighbour sampling.
pub fn random_resized_crop<T: Real>(image: &Tensor<T>, min_area: f64, seed: u64) -> Result<Tensor<T>> {
    use rand::Rng;
    let (c, h, w) = image_dims(image)?;
    let mut rng = rng::rng_for(&[stream::MASK, seed, 0xC0]);
    let area: f64 = rng.random_range(min_area.clamp(0.01, 1.0)..=1.0);
    let side = area.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);
    let src = image.data();
    Ok(Tensor::from_fn(&[c, h, w], |i| {
        let (ch_i, rem) = (i / (h * w), i % (h * w));
        let (y, x) = (rem / w, rem % w);
        let sy = y0 + y * ch / h;
        let sx = x0 + x * cw / w;
        src[ch_i * h * w + sy * w + sx]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn patchify_shapes() {
        let img = Tensor::<f32>::from_fn(&[1, 4, 4], |i| i as f32);
        let seq = patchify(&img, 2).unwrap();
        assert_eq!(seq.patches.shape(), &[4, 4]);
        assert_eq!(seq.patches.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(seq.patches.row(3), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let img = Tensor::<f32>::full(&[3, 8, 8], 0.25);
        let seq = patchify(&img, 4).unwrap();
        for i in 1..seq.len() {
            assert_eq!(seq.patches.row(i), seq.patches.row(0));
        }
    }

    #[test]
    fn patch_zero_holds_top_left_block() {
        // index-map oracle: pixel (y, x) has value y·16 + x
        let img = Tensor::<f64>::from_fn(&[1, 16, 16], |i| i as f64);
        let seq = patchify(&img, 4).unwrap();
        assert_eq!(seq.len(), 16);
        let expected: Vec<f64> = (0..4)
            .flat_map(|y| (0..4).map(move |x| (y * 16 + x) as f64))
            .collect();
        assert_eq!(seq.patches.row(0), expected.as_slice());
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let img = Tensor::<f32>::zeros(&[1, 6, 8]);
        assert!(matches!(patchify(&img, 4), Err(MugError::Config(_))));
    }

    #[test]
    fn unpatchify_single_patch_lands_at_raster_position() {
        let (c, h, w, s) = (1, 8, 12, 4);
        let n = (h / s) * (w / s);
        let k = 4; // grid row 1, column 1
        let mut patches = Tensor::<f32>::zeros(&[n, c * s * s]);
        patches.data_mut()[k * 16..(k + 1) * 16].fill(1.0);
        let img = unpatchify(&PatchSequence { patches, patch_size: s }, c, h, w).unwrap();
        for y in 0..h {
            for x in 0..w {
                let inside = (4..8).contains(&y) && (4..8).contains(&x);
                assert_eq!(img.data()[y * w + x], if inside { 1.0 } else { 0.0 }, "({y},{x})");
            }
        }
    }

    #[test]
    fn unpatchify_zeros_and_bad_shape() {
        let seq = PatchSequence {
            patches: Tensor::<f32>::zeros(&[4, 4]),
            patch_size: 2,
        };
        assert!(unpatchify(&seq, 1, 4, 4).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(unpatchify(&seq, 1, 4, 8).is_err());
    }

    #[test]
    fn sample_mask_counts() {
        let m = sample_mask(196, 0.75, 3).unwrap();
        assert_eq!(m.omega, 147);
        assert_eq!(m.visible_count(), 49);
        assert_eq!(m.keep.iter().filter(|&&k| k).count(), 49);
        assert_eq!(sample_mask(4, 0.75, 3).unwrap().omega, 3);
        assert_eq!(sample_mask(64, 0.75, 9).unwrap(), sample_mask(64, 0.75, 9).unwrap());
    }

    #[test]
    fn degenerate_ratios_are_rejected() {
        assert!(sample_mask(4, 0.05, 1).is_err());
        assert!(sample_mask(4, 0.95, 1).is_err());
        assert!(sample_mask(4, 0.0, 1).is_err());
        assert!(sample_mask(4, 1.0, 1).is_err());
    }

    #[test]
    fn mask_marginals_match_ratio() {
        let (n, trials) = (64usize, 2000u64);
        let mut counts = vec![0usize; n];
        for s in 0..trials {
            for (i, &k) in sample_mask(n, 0.75, s).unwrap().keep.iter().enumerate() {
                if !k {
                    counts[i] += 1;
                }
            }
        }
        let sigma = (trials as f64 * 0.75 * 0.25).sqrt();
        // per-patch counts are binomial; allow 4σ for the 64-way maximum
        for &c in &counts {
            assert!((c as f64 - 0.75 * trials as f64).abs() < 4.0 * sigma, "{c}");
        }
    }

    #[test]
    fn apply_mask_cases() {
        let img = Tensor::<f32>::from_fn(&[1, 4, 4], |i| i as f32);
        let seq = patchify(&img, 2).unwrap();
        let (vis, idx) = apply_mask(&seq, &MaskSpec::all_visible(4)).unwrap();
        assert_eq!(vis, seq.patches);
        assert_eq!(idx, vec![0, 1, 2, 3]);

        let single = MaskSpec::from_keep(vec![false, false, true, false]).unwrap();
        let (vis, idx) = apply_mask(&seq, &single).unwrap();
        assert_eq!(idx, vec![2]);
        assert_eq!(vis.data(), seq.patches.row(2));

        assert!(apply_mask(&seq, &MaskSpec::all_visible(5)).is_err());
    }

    #[test]
    fn scatter_with_fill_restores_all_slots() {
        let img = Tensor::<f32>::from_fn(&[1, 8, 8], |i| i as f32 + 1.0);
        let seq = patchify(&img, 2).unwrap();
        let mask = sample_mask(seq.len(), 0.5, 11).unwrap();
        let (vis, idx) = apply_mask(&seq, &mask).unwrap();
        let fill = -1.0f32;
        let mut slots = vec![vec![fill; seq.patch_dim()]; seq.len()];
        for (r, &i) in idx.iter().enumerate() {
            slots[i] = vis.row(r).to_vec();
        }
        for i in 0..seq.len() {
            if mask.keep[i] {
                assert_eq!(slots[i], seq.patches.row(i));
            } else {
                assert!(slots[i].iter().all(|&v| v == fill));
            }
        }
    }

    #[test]
    fn apply_mask_ignores_masked_content() {
        let a = Tensor::<f32>::from_fn(&[1, 8, 8], |i| i as f32 / 64.0);
        let mask = sample_mask(16, 0.75, 5).unwrap();
        let mut b_seq = patchify(&a, 2).unwrap();
        for (i, &k) in mask.keep.iter().enumerate() {
            if !k {
                b_seq.patches.data_mut()[i * 4..(i + 1) * 4].fill(0.9);
            }
        }
        let a_seq = patchify(&a, 2).unwrap();
        assert_eq!(apply_mask(&a_seq, &mask).unwrap(), apply_mask(&b_seq, &mask).unwrap());
    }

    #[test]
    fn normalized_patches_have_zero_mean() {
        let img = Tensor::<f64>::from_fn(&[3, 8, 8], |i| (i % 7) as f64 / 7.0);
        let norm = normalize_patches(&patchify(&img, 4).unwrap().patches);
        for r in 0..norm.rows() {
            let mean: f64 = norm.row(r).iter().sum::<f64>() / norm.cols() as f64;
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn crop_keeps_shape_and_range() {
        let img = Tensor::<f32>::from_fn(&[3, 32, 32], |i| (i % 5) as f32 / 4.0);
        let out = random_resized_crop(&img, 0.3, 7).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(out, random_resized_crop(&img, 0.3, 7).unwrap());
    }

    proptest! {
        #[test]
        fn patchify_roundtrip(c in 1usize..4, gh in 1usize..5, gw in 1usize..5, s in 1usize..5, seed in any::<u64>()) {
            let (h, w) = (gh * s, gw * s);
            let img = Tensor::<f32>::from_fn(&[c, h, w], |i| {
                (rng::mix(&[seed, i as u64]) >> 40) as f32 / (1u64 << 24) as f32
            });
            let seq = patchify(&img, s).unwrap();
            prop_assert_eq!(seq.len(), gh * gw);
            prop_assert_eq!(unpatchify(&seq, c, h, w).unwrap(), img);
        }

        #[test]
        fn mask_count_is_exact(n in 4usize..300, ratio in 0.2f64..0.8, seed in any::<u64>()) {
            let m = sample_mask(n, ratio, seed).unwrap();
            prop_assert_eq!(m.omega, (ratio * n as f64).round() as usize);
            prop_assert_eq!(m.keep.iter().filter(|&&k| !k).count(), m.omega);
        }
    }
}
