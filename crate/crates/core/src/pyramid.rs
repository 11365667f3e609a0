//! Multi-scale feature pyramids exchanged between the backbone, regressor,
//! teacher, and losses.
//!
//! A pyramid holds one tensor per level l, where level l lives at stride 2^l
//! relative to the input image. Levels are a contiguous ascending subset of
//! {2,3,4,5}; spatial dims at level l are ceil(H/2^l) x ceil(W/2^l).

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Var};
use ndarray::ArrayD;

pub const MIN_LEVEL: u8 = 2;
pub const MAX_LEVEL: u8 = 5;

/// Spatial extent of level `l` for an input of `size` pixels.
pub fn level_extent(size: usize, level: u8) -> usize {
    let stride = 1usize << level;
    size.div_ceil(stride)
}

/// Checks that `indices` form a non-empty, ascending, contiguous subset of
/// {2..=5}.
pub fn validate_level_set(indices: &[u8]) -> Result<()> {
    if indices.is_empty() {
        return Err(Error::config("pyramid needs at least one level"));
    }
    for &l in indices {
        if !(MIN_LEVEL..=MAX_LEVEL).contains(&l) {
            return Err(Error::config(format!(
                "level {l} outside supported range {MIN_LEVEL}..={MAX_LEVEL}"
            )));
        }
    }
    for pair in indices.windows(2) {
        if pair[1] != pair[0] + 1 {
            return Err(Error::config(format!(
                "levels must be ascending and contiguous, got {indices:?}"
            )));
        }
    }
    Ok(())
}

fn validate_shapes(
    indices: &[u8],
    shapes: &[Vec<usize>],
    input_resolution: (usize, usize),
) -> Result<()> {
    validate_level_set(indices)?;
    let (h, w) = input_resolution;
    let mut batch = None;
    for (l, shape) in indices.iter().zip(shapes.iter()) {
        if shape.len() != 4 {
            return Err(Error::shape(format!(
                "level {l} tensor must be 4-d, got shape {shape:?}"
            )));
        }
        match batch {
            None => batch = Some(shape[0]),
            Some(b) if b != shape[0] => {
                return Err(Error::shape(format!(
                    "level {l} batch {} differs from {}",
                    shape[0], b
                )))
            }
            _ => {}
        }
        let (eh, ew) = (level_extent(h, *l), level_extent(w, *l));
        if shape[2] != eh || shape[3] != ew {
            return Err(Error::shape(format!(
                "level {l} spatial dims {}x{} do not match expected {eh}x{ew} for input {h}x{w}",
                shape[2], shape[3]
            )));
        }
    }
    Ok(())
}

/// Feature maps at one or more pyramid levels. `T` is either an owned array
/// (storage form) or a tape [`Var`] (training form).
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    levels: Vec<(u8, T)>,
    input_resolution: (usize, usize),
}

impl<T> FeaturePyramid<T> {
    pub fn level_indices(&self) -> Vec<u8> {
        self.levels.iter().map(|(l, _)| *l).collect()
    }

    pub fn input_resolution(&self) -> (usize, usize) {
        self.input_resolution
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn get(&self, level: u8) -> Option<&T> {
        self.levels.iter().find(|(l, _)| *l == level).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u8, &T)> {
        self.levels.iter().map(|(l, t)| (*l, t))
    }

    pub fn into_levels(self) -> Vec<(u8, T)> {
        self.levels
    }
}

impl<S: Scalar> FeaturePyramid<ArrayD<S>> {
    pub fn new(levels: Vec<(u8, ArrayD<S>)>, input_resolution: (usize, usize)) -> Result<Self> {
        let indices: Vec<u8> = levels.iter().map(|(l, _)| *l).collect();
        let shapes: Vec<Vec<usize>> =
            levels.iter().map(|(_, t)| t.shape().to_vec()).collect();
        validate_shapes(&indices, &shapes, input_resolution)?;
        Ok(FeaturePyramid { levels, input_resolution })
    }

    pub fn batch_size(&self) -> usize {
        self.levels[0].1.shape()[0]
    }

    /// Registers every level on the tape: leaves when `requires_grad`,
    /// constants otherwise (the teacher side of a distillation loss).
    pub fn to_tape(&self, tape: &Tape<S>, requires_grad: bool) -> FeaturePyramid<Var> {
        let levels = self
            .levels
            .iter()
            .map(|(l, t)| {
                let v = if requires_grad {
                    tape.leaf(std::sync::Arc::new(t.clone()))
                } else {
                    tape.constant(t.clone())
                };
                (*l, v)
            })
            .collect();
        FeaturePyramid { levels, input_resolution: self.input_resolution }
    }
}

impl FeaturePyramid<Var> {
    pub fn from_vars<S: Scalar>(
        tape: &Tape<S>,
        levels: Vec<(u8, Var)>,
        input_resolution: (usize, usize),
    ) -> Result<Self> {
        let indices: Vec<u8> = levels.iter().map(|(l, _)| *l).collect();
        let shapes: Vec<Vec<usize>> =
            levels.iter().map(|(_, v)| tape.shape(*v)).collect();
        validate_shapes(&indices, &shapes, input_resolution)?;
        Ok(FeaturePyramid { levels, input_resolution })
    }

    /// Reads every level's value off the tape into a storage pyramid.
    pub fn to_arrays<S: Scalar>(&self, tape: &Tape<S>) -> FeaturePyramid<ArrayD<S>> {
        FeaturePyramid {
            levels: self
                .levels
                .iter()
                .map(|(l, v)| (*l, (*tape.value(*v)).clone()))
                .collect(),
            input_resolution: self.input_resolution,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    fn zeros(shape: &[usize]) -> ArrayD<f32> {
        ArrayD::zeros(IxDyn(shape))
    }

    #[test]
    fn accepts_contiguous_level_subsets() {
        let p = FeaturePyramid::new(
            vec![
                (2, zeros(&[1, 8, 16, 16])),
                (3, zeros(&[1, 16, 8, 8])),
                (4, zeros(&[1, 32, 4, 4])),
                (5, zeros(&[1, 64, 2, 2])),
            ],
            (64, 64),
        )
        .unwrap();
        assert_eq!(p.level_indices(), vec![2, 3, 4, 5]);
        assert_eq!(p.batch_size(), 1);
        let sub = FeaturePyramid::new(
            vec![(3, zeros(&[2, 4, 8, 8])), (4, zeros(&[2, 4, 4, 4]))],
            (64, 64),
        );
        assert!(sub.is_ok());
    }

    #[test]
    fn rejects_gapped_or_out_of_range_levels() {
        let gapped = FeaturePyramid::new(
            vec![(2, zeros(&[1, 8, 16, 16])), (4, zeros(&[1, 8, 4, 4]))],
            (64, 64),
        );
        assert!(gapped.is_err());
        let low = FeaturePyramid::new(vec![(1, zeros(&[1, 8, 32, 32]))], (64, 64));
        assert!(low.is_err());
        let empty = FeaturePyramid::<ArrayD<f32>>::new(vec![], (64, 64));
        assert!(empty.is_err());
    }

    #[test]
    fn rejects_wrong_spatial_or_batch_dims() {
        let bad_spatial = FeaturePyramid::new(vec![(2, zeros(&[1, 8, 15, 16]))], (64, 64));
        assert!(bad_spatial.is_err());
        let bad_batch = FeaturePyramid::new(
            vec![(2, zeros(&[1, 8, 16, 16])), (3, zeros(&[2, 8, 8, 8]))],
            (64, 64),
        );
        assert!(bad_batch.is_err());
    }

    #[test]
    fn odd_input_sizes_use_ceil_extents() {
        assert_eq!(level_extent(65, 2), 17);
        assert_eq!(level_extent(65, 5), 3);
        let p = FeaturePyramid::new(vec![(5, zeros(&[1, 4, 3, 2]))], (65, 48));
        assert!(p.is_ok());
    }

    #[test]
    fn tape_roundtrip_preserves_values() {
        let mut arr = zeros(&[1, 2, 16, 16]);
        arr[[0, 1, 3, 4]] = 2.5;
        let p = FeaturePyramid::new(vec![(2, arr.clone())], (64, 64)).unwrap();
        let tape = Tape::<f32>::new();
        let tp = p.to_tape(&tape, false);
        assert!(!tape.requires_grad(*tp.get(2).unwrap()));
        let back = tp.to_arrays(&tape);
        assert_eq!(back.get(2).unwrap(), &arr);
        let tp2 = p.to_tape(&tape, true);
        assert!(tape.requires_grad(*tp2.get(2).unwrap()));
    }
}
