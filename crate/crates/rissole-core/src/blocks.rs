//! Partitioning a C x H x W latent into b equal spatial blocks.
//!
//! Block i lives at grid cell (i / g, i % g) with g = sqrt(b). This row-major
//! ordering is canonical: database shards, conditioning, and sampling all
//! index blocks the same way.

use crate::error::{Error, Result};
use crate::tensor::{dims3, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub b: usize,
    pub g: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl BlockLayout {
    pub fn new(b: usize, c: usize, h: usize, w: usize) -> Result<Self> {
        let g = (b as f64).sqrt().round() as usize;
        if b == 0 || g * g != b {
            return Err(Error::InvalidArgument(format!(
                "block count b={b} must be a perfect square"
            )));
        }
        if h % g != 0 || w % g != 0 {
            return Err(Error::InvalidArgument(format!(
                "latent {h}x{w} not divisible by grid side {g}"
            )));
        }
        Ok(BlockLayout { b, g, c, h, w })
    }

    pub fn block_h(&self) -> usize {
        self.h / self.g
    }

    pub fn block_w(&self) -> usize {
        self.w / self.g
    }

    /// Flattened length of one block.
    pub fn block_dim(&self) -> usize {
        self.c * self.block_h() * self.block_w()
    }

    pub fn block_shape(&self) -> [usize; 3] {
        [self.c, self.block_h(), self.block_w()]
    }

    /// Grid cell of block index i.
    pub fn cell(&self, i: usize) -> (usize, usize) {
        (i / self.g, i % self.g)
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let [c, h, w] = dims3(z, "latent")?;
        if (c, h, w) != (self.c, self.h, self.w) {
            return Err(Error::ShapeMismatch(format!(
                "latent {:?} does not match layout {}x{}x{}",
                z.shape(),
                self.c,
                self.h,
                self.w
            )));
        }
        Ok(())
    }
}

pub fn partition(layout: &BlockLayout, z: &Tensor) -> Result<Vec<Tensor>> {
    layout.check_latent(z)?;
    let (bh, bw) = (layout.block_h(), layout.block_w());
    let mut blocks = Vec::with_capacity(layout.b);
    for i in 0..layout.b {
        let (row, col) = layout.cell(i);
        let mut block = Tensor::zeros(&[layout.c, bh, bw]);
        for c in 0..layout.c {
            for y in 0..bh {
                for x in 0..bw {
                    block.set(&[c, y, x], z.get(&[c, row * bh + y, col * bw + x]));
                }
            }
        }
        blocks.push(block);
    }
    Ok(blocks)
}

pub fn reassemble(layout: &BlockLayout, blocks: &[Tensor]) -> Result<Tensor> {
    if blocks.len() != layout.b {
        return Err(Error::ShapeMismatch(format!(
            "expected {} blocks, got {}",
            layout.b,
            blocks.len()
        )));
    }
    let (bh, bw) = (layout.block_h(), layout.block_w());
    let mut z = Tensor::zeros(&[layout.c, layout.h, layout.w]);
    for (i, block) in blocks.iter().enumerate() {
        if block.shape() != layout.block_shape() {
            return Err(Error::ShapeMismatch(format!(
                "block {i} has shape {:?}, expected {:?}",
                block.shape(),
                layout.block_shape()
            )));
        }
        let (row, col) = layout.cell(i);
        for c in 0..layout.c {
            for y in 0..bh {
                for x in 0..bw {
                    z.set(&[c, row * bh + y, col * bw + x], block.get(&[c, y, x]));
                }
            }
        }
    }
    Ok(z)
}

/// Row-major flattening of a block.
pub fn flatten_block(block: &Tensor) -> Vec<f64> {
    block.data().to_vec()
}

pub fn unflatten_block(layout: &BlockLayout, flat: &[f64]) -> Result<Tensor> {
    Tensor::from_vec(&layout.block_shape(), flat.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn rejects_non_square_and_indivisible() {
        assert!(BlockLayout::new(5, 1, 4, 4).is_err());
        assert!(BlockLayout::new(4, 1, 5, 4).is_err());
        assert!(BlockLayout::new(0, 1, 4, 4).is_err());
    }

    #[test]
    fn degenerate_single_block() {
        let layout = BlockLayout::new(1, 2, 4, 4).unwrap();
        let z = Tensor::randn(&mut Rng::new(1), &[2, 4, 4]).unwrap();
        let blocks = partition(&layout, &z).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0], z);
    }

    #[test]
    fn four_blocks_index_arithmetic() {
        let layout = BlockLayout::new(4, 1, 4, 4).unwrap();
        let z = Tensor::from_vec(&[1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let blocks = partition(&layout, &z).unwrap();
        assert_eq!(blocks[0].data(), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(blocks[3].data(), &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn nine_block_means_equal_average_pool() {
        let layout = BlockLayout::new(9, 1, 6, 6).unwrap();
        let z = Tensor::randn(&mut Rng::new(3), &[1, 6, 6]).unwrap();
        let blocks = partition(&layout, &z).unwrap();
        for (i, block) in blocks.iter().enumerate() {
            let (row, col) = layout.cell(i);
            // Independent 3x3-grid average pool.
            let mut acc = 0.0;
            for y in 0..2 {
                for x in 0..2 {
                    acc += z.get(&[0, row * 2 + y, col * 2 + x]);
                }
            }
            assert!((block.mean() - acc / 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_bit_exact() {
        let mut rng = Rng::new(17);
        for (b, h, w) in [(1, 4, 4), (4, 4, 4), (9, 6, 6), (16, 8, 8)] {
            let layout = BlockLayout::new(b, 2, h, w).unwrap();
            let z = Tensor::randn(&mut rng, &[2, h, w]).unwrap();
            let back = reassemble(&layout, &partition(&layout, &z).unwrap()).unwrap();
            assert_eq!(back, z);
        }
    }

    #[test]
    fn zero_blocks_give_zero_tensor() {
        let layout = BlockLayout::new(4, 1, 4, 4).unwrap();
        let blocks = vec![Tensor::zeros(&[1, 2, 2]); 4];
        let z = reassemble(&layout, &blocks).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permuted_blocks_change_result() {
        let layout = BlockLayout::new(4, 1, 4, 4).unwrap();
        // Distinct constant blocks so any swap is visible.
        let z = reassemble(
            &layout,
            &[
                Tensor::full(&[1, 2, 2], 1.0),
                Tensor::full(&[1, 2, 2], 2.0),
                Tensor::full(&[1, 2, 2], 3.0),
                Tensor::full(&[1, 2, 2], 4.0),
            ],
        )
        .unwrap();
        let mut blocks = partition(&layout, &z).unwrap();
        blocks.swap(0, 3);
        assert_ne!(reassemble(&layout, &blocks).unwrap(), z);
    }

    #[test]
    fn wrong_block_count_or_shape_errors() {
        let layout = BlockLayout::new(4, 1, 4, 4).unwrap();
        assert!(reassemble(&layout, &vec![Tensor::zeros(&[1, 2, 2]); 3]).is_err());
        let bad = vec![Tensor::zeros(&[1, 4, 4]); 4];
        assert!(reassemble(&layout, &bad).is_err());
        assert!(partition(&layout, &Tensor::zeros(&[1, 6, 6])).is_err());
    }

    #[test]
    fn flatten_is_row_major() {
        let block = Tensor::from_vec(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(flatten_block(&block), vec![1.0, 2.0, 3.0, 4.0]);
        let layout = BlockLayout::new(4, 1, 4, 4).unwrap();
        let back = unflatten_block(&layout, &flatten_block(&block)).unwrap();
        assert_eq!(back, block);
    }

    #[test]
    fn flattened_euclidean_equals_frobenius() {
        let mut rng = Rng::new(5);
        for _ in 0..10 {
            let a = Tensor::randn(&mut rng, &[2, 3, 3]).unwrap();
            let b = Tensor::randn(&mut rng, &[2, 3, 3]).unwrap();
            let frob = a.sub(&b).unwrap().sq_norm().sqrt();
            let euclid: f64 = flatten_block(&a)
                .iter()
                .zip(flatten_block(&b))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            assert!((frob - euclid).abs() < 1e-12);
        }
    }

    #[test]
    fn disjoint_coverage() {
        let layout = BlockLayout::new(9, 2, 6, 6).unwrap();
        // Distinct values so membership counting works.
        let z = Tensor::from_vec(&[2, 6, 6], (0..72).map(|v| v as f64).collect()).unwrap();
        let blocks = partition(&layout, &z).unwrap();
        let mut seen = vec![0usize; 72];
        for block in &blocks {
            for &v in block.data() {
                seen[v as usize] += 1;
            }
        }
        assert!(seen.iter().all(|&n| n == 1));
    }
}
