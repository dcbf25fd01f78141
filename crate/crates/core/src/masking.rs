//! Random patch masking and the bookkeeping around it.
//!
//! Indices here are 0-based patch indices `0..N`; the cls token lives
//! outside this index space and is never masked.

use rand::seq::index::sample;
use rand::Rng;

use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// A partition of the patch indices into masked and visible sets.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskSpec {
    num_patches: usize,
    masked: Vec<usize>,
    visible: Vec<usize>,
}

impl MaskSpec {
    /// Builds a mask from any collection of distinct in-range indices.
    pub fn new(num_patches: usize, masked: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut flags = vec![false; num_patches];
        for i in masked {
            if i >= num_patches {
                return Err(TensorError::IndexOutOfRange {
                    op: "mask",
                    index: i,
                    extent: num_patches,
                });
            }
            if flags[i] {
                return Err(TensorError::Invalid(format!("patch {i} masked twice")));
            }
            flags[i] = true;
        }
        let (mut masked, mut visible) = (Vec::new(), Vec::new());
        for (i, &m) in flags.iter().enumerate() {
            if m {
                masked.push(i);
            } else {
                visible.push(i);
            }
        }
        Ok(Self {
            num_patches,
            masked,
            visible,
        })
    }

    pub fn none(num_patches: usize) -> Self {
        Self::new(num_patches, []).expect("empty mask is valid")
    }

    pub fn all(num_patches: usize) -> Self {
        Self::new(num_patches, 0..num_patches).expect("full mask is valid")
    }

    pub fn num_patches(&self) -> usize {
        self.num_patches
    }

    /// Sorted masked indices.
    pub fn masked(&self) -> &[usize] {
        &self.masked
    }

    /// Sorted visible indices.
    pub fn visible(&self) -> &[usize] {
        &self.visible
    }

    pub fn ratio(&self) -> f64 {
        if self.num_patches == 0 {
            0.0
        } else {
            self.masked.len() as f64 / self.num_patches as f64
        }
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// `round(ratio · n)` with halves rounded up.
pub fn mask_count(n: usize, ratio: f64) -> usize {
    ((ratio * n as f64) + 0.5).floor() as usize
}

pub fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(TensorError::Invalid(format!(
            "mask ratio must lie in [0, 1], got {ratio}"
        )));
    }
    Ok(())
}

/// Uniformly random subset of size `round(ratio · n)`.
pub fn sample_mask<R: Rng + ?Sized>(n: usize, ratio: f64, rng: &mut R) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    let k = mask_count(n, ratio).min(n);
    MaskSpec::new(n, sample(rng, n, k).into_iter())
}

/// Visible patches in their original order, with their positions.
pub fn pack_visible<T: Clone>(patches: &[T], mask: &MaskSpec) -> Result<(Vec<T>, Vec<usize>)> {
    if patches.len() != mask.num_patches() {
        return Err(TensorError::ShapeMismatch {
            op: "pack_visible",
            lhs: vec![patches.len()],
            rhs: vec![mask.num_patches()],
        });
    }
    let packed = mask.visible().iter().map(|&i| patches[i].clone()).collect();
    Ok((packed, mask.visible().to_vec()))
}

/// Inverse of [`pack_visible`]: places items at their positions and fills
/// the rest with `placeholder`.
pub fn scatter_back<T: Clone>(items: &[T], positions: &[usize], n: usize, placeholder: T) -> Result<Vec<T>> {
    if items.len() != positions.len() {
        return Err(TensorError::ShapeMismatch {
            op: "scatter_back",
            lhs: vec![items.len()],
            rhs: vec![positions.len()],
        });
    }
    let mut out = vec![placeholder; n];
    for (item, &p) in items.iter().zip(positions) {
        if p >= n {
            return Err(TensorError::IndexOutOfRange {
                op: "scatter_back",
                index: p,
                extent: n,
            });
        }
        out[p] = item.clone();
    }
    Ok(out)
}

/// Gathers the visible patches of each sample from `[B, N, D]` patch data
/// into `[B, n_visible, D]`. All masks must hide the same number of patches.
pub fn visible_patch_batch(patches: &Tensor, masks: &[MaskSpec]) -> Result<Tensor> {
    let s = patches.shape();
    if s.len() != 3 || s[0] != masks.len() {
        return Err(TensorError::ShapeMismatch {
            op: "visible_patch_batch",
            lhs: s.to_vec(),
            rhs: vec![masks.len()],
        });
    }
    let (n, d) = (s[1], s[2]);
    let nv = uniform_visible_count(masks, n)?;
    let mut data = Vec::with_capacity(masks.len() * nv * d);
    for (b, m) in masks.iter().enumerate() {
        for &i in m.visible() {
            let o = (b * n + i) * d;
            data.extend_from_slice(&patches.data()[o..o + d]);
        }
    }
    Tensor::new(vec![masks.len(), nv, d], data)
}

fn uniform_visible_count(masks: &[MaskSpec], n: usize) -> Result<usize> {
    let nv = masks.first().map_or(0, |m| m.visible().len());
    for m in masks {
        if m.num_patches() != n || m.visible().len() != nv {
            return Err(TensorError::Invalid(
                "masks in a batch must share geometry and mask count".into(),
            ));
        }
    }
    Ok(nv)
}

/// Builds the decoder input `[B, N + 1, W]`: slot 0 holds the student cls
/// feature, visible slots hold student features, masked slots hold the mask
/// token, and row `i` of `pos_embed` is added to slot `i`.
///
/// `visible_feats` is `[B, n_visible + 1, W]` (cls first), `mask_token` is
/// `[1, W]` and `pos_embed` is `[N + 1, W]`.
pub fn assemble_for_decoder(
    g: &mut Graph,
    visible_feats: Var,
    masks: &[MaskSpec],
    mask_token: Var,
    pos_embed: Var,
) -> Result<Var> {
    let s = g.shape(visible_feats).to_vec();
    let n = masks.first().map_or(0, MaskSpec::num_patches);
    let nv = uniform_visible_count(masks, n)?;
    if s.len() != 3 || s[0] != masks.len() || s[1] != nv + 1 {
        return Err(TensorError::ShapeMismatch {
            op: "assemble_for_decoder",
            lhs: s,
            rhs: vec![masks.len(), nv + 1],
        });
    }
    let (bsz, w) = (s[0], s[2]);
    if g.shape(pos_embed) != [n + 1, w] || g.shape(mask_token) != [1, w] {
        return Err(TensorError::ShapeMismatch {
            op: "assemble_for_decoder",
            lhs: g.shape(pos_embed).to_vec(),
            rhs: vec![n + 1, w],
        });
    }
    let rows = bsz * (n + 1);
    let mut vis_rows = Vec::with_capacity(bsz * (nv + 1));
    let mut mask_rows = Vec::new();
    for (b, m) in masks.iter().enumerate() {
        let base = b * (n + 1);
        vis_rows.push(base);
        vis_rows.extend(m.visible().iter().map(|&i| base + 1 + i));
        mask_rows.extend(m.masked().iter().map(|&i| base + 1 + i));
    }
    let flat = g.reshape(visible_feats, &[bsz * (nv + 1), w])?;
    let mut full = g.scatter_rows(flat, &vis_rows, rows)?;
    if !mask_rows.is_empty() {
        let tokens = g.gather_rows(mask_token, &vec![0; mask_rows.len()])?;
        let placed = g.scatter_rows(tokens, &mask_rows, rows)?;
        full = g.add(full, placed)?;
    }
    let full = g.reshape(full, &[bsz, n + 1, w])?;
    g.add(full, pos_embed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn counts_round_half_up() {
        assert_eq!(mask_count(16, 0.75), 12);
        assert_eq!(mask_count(196, 0.75), 147);
        assert_eq!(mask_count(2, 0.25), 1);
        assert_eq!(mask_count(16, 0.0), 0);
    }

    #[test]
    fn sample_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = sample_mask(16, 0.75, &mut rng).unwrap();
        assert_eq!(m.masked().len(), 12);
        assert_eq!(m.visible().len(), 4);
        assert!(sample_mask(16, 1.5, &mut rng).is_err());
        assert!(sample_mask(16, 0.0, &mut rng).unwrap().masked().is_empty());
    }

    #[test]
    fn pack_small_example() {
        // 1-based {2,3} masked out of 4 leaves patches 1 and 4.
        let m = MaskSpec::new(4, [1, 2]).unwrap();
        let (packed, pos) = pack_visible(&["p1", "p2", "p3", "p4"], &m).unwrap();
        assert_eq!(packed, ["p1", "p4"]);
        assert_eq!(pos, [0, 3]);
        let back = scatter_back(&packed, &pos, 4, "_").unwrap();
        assert_eq!(back, ["p1", "_", "_", "p4"]);
    }

    #[test]
    fn duplicate_or_out_of_range_rejected() {
        assert!(MaskSpec::new(4, [1, 1]).is_err());
        assert!(MaskSpec::new(4, [4]).is_err());
    }

    #[test]
    fn assemble_all_masked() {
        let mut g = Graph::new();
        let feats = g.param(Tensor::new(vec![1, 1, 2], vec![5.0, 6.0]).unwrap());
        let m = g.param(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let pos = g.constant(Tensor::new(vec![3, 2], vec![0.0, 0.0, 10.0, 10.0, 20.0, 20.0]).unwrap());
        let out = assemble_for_decoder(&mut g, feats, &[MaskSpec::all(2)], m, pos).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 6.0, 11.0, 12.0, 21.0, 22.0]);
    }
}
