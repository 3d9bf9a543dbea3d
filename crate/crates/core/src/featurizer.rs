//! Inputs for the prototyper without a neural backbone.
//!
//! Individual crops are embedded with a fixed, seeded Gaussian projection of
//! flattened RGB patches. Groups are proposed by single-linkage clustering of
//! box centres.

use image::{imageops::FilterType, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::geometry::{union_box, BBox};
use crate::prototyper::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum FeaturizerError {
    #[error("crop has zero area")]
    EmptyCrop,
    #[error("patch size and embedding dimension must be >= 1")]
    BadDims,
    #[error("no individuals to group")]
    NoIndividuals,
}

/// Patch tokens of one individual.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedding {
    pub tokens: Matrix,
    pub patch_size: u32,
    pub individual_index: usize,
}

/// Grid of patches a crop of the given size produces: `(rows, cols)`.
pub fn patch_grid(width: u32, height: u32, patch: u32) -> (u32, u32) {
    (height.div_ceil(patch), width.div_ceil(patch))
}

/// Seeded projection from a flattened `P×P×3` patch to `d` dimensions.
pub fn projection_matrix(patch: u32, dim: usize, seed: u64) -> Matrix {
    let fan_in = (patch * patch * 3) as usize;
    let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..fan_in * dim).map(|_| normal.sample(&mut rng)).collect();
    Matrix::from_vec(fan_in, dim, data)
}

/// Embeds one crop: resize each side up to the next multiple of `patch`,
/// split into non-overlapping patches in row-major order, flatten each patch
/// (`[0, 1]` RGB, channel-interleaved) and project it to `dim` dimensions.
pub fn embed_individual(
    crop: &RgbImage,
    patch: u32,
    dim: usize,
    seed: u64,
    individual_index: usize,
) -> Result<PatchEmbedding, FeaturizerError> {
    if patch == 0 || dim == 0 {
        return Err(FeaturizerError::BadDims);
    }
    if crop.width() == 0 || crop.height() == 0 {
        return Err(FeaturizerError::EmptyCrop);
    }
    let (rows, cols) = patch_grid(crop.width(), crop.height(), patch);
    let (tw, th) = (cols * patch, rows * patch);
    let resized;
    let img = if (tw, th) == crop.dimensions() {
        crop
    } else {
        resized = image::imageops::resize(crop, tw, th, FilterType::Triangle);
        &resized
    };

    let proj = projection_matrix(patch, dim, seed);
    let fan_in = proj.rows();
    let mut flat = Matrix::zeros((rows * cols) as usize, fan_in);
    for r in 0..rows {
        for c in 0..cols {
            let row = flat.row_mut((r * cols + c) as usize);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    let p = img.get_pixel(c * patch + px, r * patch + py);
                    for ch in 0..3 {
                        row[k] = p[ch] as f64 / 255.0;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(PatchEmbedding {
        tokens: flat.matmul(&proj),
        patch_size: patch,
        individual_index,
    })
}

/// Shrinks `crop` uniformly until its patch grid holds at most `max_tokens`
/// patches.
pub fn fit_to_token_budget(crop: &RgbImage, patch: u32, max_tokens: usize) -> RgbImage {
    let (rows, cols) = patch_grid(crop.width(), crop.height(), patch);
    if (rows * cols) as usize <= max_tokens {
        return crop.clone();
    }
    let mut scale = ((max_tokens as f64) / (rows * cols) as f64).sqrt();
    loop {
        let w = ((crop.width() as f64 * scale).floor() as u32).max(1);
        let h = ((crop.height() as f64 * scale).floor() as u32).max(1);
        let (r, c) = patch_grid(w, h, patch);
        if (r * c) as usize <= max_tokens || (w == 1 && h == 1) {
            return image::imageops::resize(crop, w, h, FilterType::Triangle);
        }
        scale *= 0.9;
    }
}

/// A proposed group of individuals.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupProposal {
    /// Ascending individual indices.
    pub member_indices: Vec<usize>,
    pub bounds: BBox,
}

/// Single-linkage clustering on box-centre distance: groups are the connected
/// components of the graph linking centres closer than `distance_threshold`.
///
/// Groups are ordered by their smallest member index.
pub fn propose_groups(individuals: &[BBox], distance_threshold: f64) -> Result<Vec<GroupProposal>, FeaturizerError> {
    if individuals.is_empty() {
        return Err(FeaturizerError::NoIndividuals);
    }
    let n = individuals.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let centers: Vec<(f64, f64)> = individuals.iter().map(BBox::center).collect();
    for i in 0..n {
        for j in i + 1..n {
            let (dx, dy) = (centers[i].0 - centers[j].0, centers[i].1 - centers[j].1);
            if (dx * dx + dy * dy).sqrt() < distance_threshold {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        match groups.iter_mut().find(|(r, _)| *r == root) {
            Some((_, members)) => members.push(i),
            None => groups.push((root, vec![i])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(_, members)| {
            let bounds = members[1..]
                .iter()
                .fold(individuals[members[0]].with_score(None), |acc, &m| union_box(&acc, &individuals[m]));
            GroupProposal {
                member_indices: members,
                bounds,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn noisy(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7 % 256) as u8, (y * 13 % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn embedding_shape() {
        let e = embed_individual(&noisy(32, 32), 16, 8, 1, 0).unwrap();
        assert_eq!((e.tokens.rows(), e.tokens.cols()), (4, 8));
        // 20x40 rounds up to a 2x3 grid.
        let e = embed_individual(&noisy(40, 20), 16, 8, 1, 0).unwrap();
        assert_eq!(e.tokens.rows(), 6);
    }

    #[test]
    fn embedding_is_deterministic() {
        let img = noisy(32, 48);
        let a = embed_individual(&img, 16, 8, 42, 0).unwrap();
        let b = embed_individual(&img, 16, 8, 42, 0).unwrap();
        assert_eq!(a.tokens.as_slice(), b.tokens.as_slice());
        let c = embed_individual(&img, 16, 8, 43, 0).unwrap();
        assert_ne!(a.tokens.as_slice(), c.tokens.as_slice());
    }

    #[test]
    fn zero_crop_gives_zero_tokens() {
        let e = embed_individual(&RgbImage::new(32, 32), 16, 8, 5, 0).unwrap();
        assert!(e.tokens.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_inputs() {
        assert_eq!(embed_individual(&RgbImage::new(0, 5), 16, 8, 0, 0).unwrap_err(), FeaturizerError::EmptyCrop);
        assert_eq!(embed_individual(&noisy(4, 4), 0, 8, 0, 0).unwrap_err(), FeaturizerError::BadDims);
        assert_eq!(propose_groups(&[], 10.0).unwrap_err(), FeaturizerError::NoIndividuals);
    }

    #[test]
    fn token_budget() {
        let big = noisy(200, 480);
        let fitted = fit_to_token_budget(&big, 16, 64);
        let (r, c) = patch_grid(fitted.width(), fitted.height(), 16);
        assert!(r * c <= 64);
    }

    #[test]
    fn grouping_examples() {
        let a = BBox::new(0., 0., 10., 10.).unwrap();
        let near = BBox::new(5., 0., 10., 10.).unwrap();
        let far = BBox::new(500., 0., 10., 10.).unwrap();
        let g = propose_groups(&[a, near], 50.0).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].member_indices, vec![0, 1]);
        assert_eq!(propose_groups(&[a, far], 50.0).unwrap().len(), 2);
        assert_eq!(propose_groups(&[a], 50.0).unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn grouping_is_a_partition(boxes in proptest::collection::vec((0.0..1000.0f64, 0.0..400.0f64, 1.0..60.0f64, 1.0..100.0f64), 1..30), thr in 1.0..300.0f64) {
            let boxes: Vec<BBox> = boxes.into_iter().map(|(x, y, w, h)| BBox::new(x, y, w, h).unwrap()).collect();
            let groups = propose_groups(&boxes, thr).unwrap();
            let mut seen: Vec<usize> = groups.iter().flat_map(|g| g.member_indices.clone()).collect();
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..boxes.len()).collect::<Vec<_>>());
            for g in &groups {
                prop_assert!(!g.member_indices.is_empty());
                for &m in &g.member_indices {
                    prop_assert!(g.bounds.contains(&boxes[m]));
                }
            }
        }
    }
}
