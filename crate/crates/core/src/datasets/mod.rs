//! Labeled image sources: folder trees, the synthetic shapes generator,
//! class-level splits and the preprocessing pipeline.

mod augment;
mod folder;
mod shapes;

use std::sync::Arc;

use rand::seq::index::sample;

pub use augment::{preprocess, AugmentParams, Mode};
pub use folder::{load_image_folder, write_image_folder};
pub use shapes::{generate_shapes, ShapeKind, ShapesSpec};

use crate::error::{validation, Error, Result};
use crate::seed::derive_rng;

/// HWC image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(validation(format!(
                "image buffer has {} values, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }
}

#[derive(Clone, Debug)]
pub struct Item {
    pub id: String,
    pub class_id: usize,
    pub image: Arc<Image>,
}

/// Images with contiguous integer class labels `0..C`.
#[derive(Clone, Debug)]
pub struct LabeledImageSet {
    items: Vec<Item>,
    class_names: Vec<String>,
    by_class: Vec<Vec<usize>>,
    image_size: (usize, usize),
    channels: usize,
}

impl LabeledImageSet {
    pub fn new(items: Vec<Item>, class_names: Vec<String>) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Structure("image set has no items".into()))?;
        let image_size = first.image.size();
        let channels = first.image.channels;
        let mut by_class = vec![Vec::new(); class_names.len()];
        for (i, item) in items.iter().enumerate() {
            if item.class_id >= class_names.len() {
                return Err(Error::Structure(format!(
                    "item {} has class {} but only {} classes are named",
                    item.id,
                    item.class_id,
                    class_names.len()
                )));
            }
            if item.image.size() != image_size || item.image.channels != channels {
                return Err(Error::Structure(format!(
                    "item {} has shape {:?}x{} but the set uses {:?}x{}",
                    item.id,
                    item.image.size(),
                    item.image.channels,
                    image_size,
                    channels
                )));
            }
            by_class[item.class_id].push(i);
        }
        if let Some(c) = by_class.iter().position(Vec::is_empty) {
            return Err(Error::Structure(format!(
                "class {} ({}) has no items",
                c, class_names[c]
            )));
        }
        Ok(LabeledImageSet {
            items,
            class_names,
            by_class,
            image_size,
            channels,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.image_size
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Item indices of one class, in insertion order.
    pub fn class_items(&self, class_id: usize) -> &[usize] {
        &self.by_class[class_id]
    }

    /// Keeps only the listed classes, renumbered `0..classes.len()` in the
    /// given order.
    pub fn subset_classes(&self, classes: &[usize]) -> Result<LabeledImageSet> {
        let mut items = Vec::new();
        let mut names = Vec::with_capacity(classes.len());
        for (new_id, &c) in classes.iter().enumerate() {
            if c >= self.num_classes() {
                return Err(validation(format!("class {c} out of range")));
            }
            names.push(self.class_names[c].clone());
            for &i in &self.by_class[c] {
                let mut item = self.items[i].clone();
                item.class_id = new_id;
                items.push(item);
            }
        }
        LabeledImageSet::new(items, names)
    }

    /// Splits each class's items into a head and a tail of `fraction` of the
    /// items (at least one item stays in the head).
    pub fn split_items(&self, fraction: f64) -> Result<(LabeledImageSet, LabeledImageSet)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(validation("item split fraction must be in [0, 1)"));
        }
        let mut head = Vec::new();
        let mut tail = Vec::new();
        for idxs in &self.by_class {
            let n_tail = ((idxs.len() as f64) * fraction).round() as usize;
            let n_tail = n_tail.min(idxs.len() - 1);
            let cut = idxs.len() - n_tail;
            head.extend(idxs[..cut].iter().map(|&i| self.items[i].clone()));
            tail.extend(idxs[cut..].iter().map(|&i| self.items[i].clone()));
        }
        let head = LabeledImageSet::new(head, self.class_names.clone())?;
        let tail = LabeledImageSet::new(tail, self.class_names.clone()).map_err(|_| {
            validation("item split leaves some classes without held-out items")
        })?;
        Ok((head, tail))
    }
}

/// Partitions the classes of `set` into a training part and `holdout`
/// validation classes chosen uniformly at random.
pub fn split_classes(
    set: &LabeledImageSet,
    holdout: usize,
    seed: u64,
) -> Result<(LabeledImageSet, LabeledImageSet)> {
    let c = set.num_classes();
    if holdout == 0 || holdout >= c {
        return Err(validation(format!(
            "holdout classes must be in 1..{c}, got {holdout}"
        )));
    }
    let mut rng = derive_rng(seed, "split-classes", &[c as u64, holdout as u64]);
    let mut val: Vec<usize> = sample(&mut rng, c, holdout).into_vec();
    val.sort_unstable();
    let train: Vec<usize> = (0..c).filter(|i| val.binary_search(i).is_err()).collect();
    Ok((set.subset_classes(&train)?, set.subset_classes(&val)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn toy_set(classes: usize, per_class: usize) -> LabeledImageSet {
        let mut items = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                let v = (c * per_class + i) as f32 / (classes * per_class) as f32;
                items.push(Item {
                    id: format!("{c}/{i}"),
                    class_id: c,
                    image: Arc::new(Image::filled(4, 4, 3, v)),
                });
            }
        }
        let names = (0..classes).map(|c| format!("class{c}")).collect();
        LabeledImageSet::new(items, names).unwrap()
    }

    #[test]
    fn split_thirty_classes() {
        let set = toy_set(30, 2);
        let (train, val) = split_classes(&set, 10, 3).unwrap();
        assert_eq!(train.num_classes(), 20);
        assert_eq!(val.num_classes(), 10);
        let mut names: Vec<&String> = train.class_names().iter().chain(val.class_names()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 30);
    }

    #[test]
    fn holdout_nineteen_of_twentyone() {
        let set = toy_set(21, 1);
        let (train, val) = split_classes(&set, 19, 0).unwrap();
        assert_eq!(train.num_classes(), 2);
        assert_eq!(val.num_classes(), 19);
    }

    #[test]
    fn split_is_deterministic() {
        let set = toy_set(12, 1);
        let a = split_classes(&set, 4, 11).unwrap();
        let b = split_classes(&set, 4, 11).unwrap();
        assert_eq!(a.1.class_names(), b.1.class_names());
        assert_eq!(a.0.class_names(), b.0.class_names());
    }

    #[test]
    fn holdout_out_of_range_is_rejected() {
        let set = toy_set(5, 1);
        assert!(matches!(split_classes(&set, 5, 0), Err(Error::Validation(_))));
        assert!(matches!(split_classes(&set, 0, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn mismatched_image_shapes_are_rejected() {
        let items = vec![
            Item { id: "a".into(), class_id: 0, image: Arc::new(Image::filled(4, 4, 3, 0.0)) },
            Item { id: "b".into(), class_id: 0, image: Arc::new(Image::filled(5, 4, 3, 0.0)) },
        ];
        assert!(matches!(
            LabeledImageSet::new(items, vec!["x".into()]),
            Err(Error::Structure(_))
        ));
    }

    proptest! {
        #[test]
        fn split_partitions_classes(classes in 2usize..40, seed in any::<u64>(), frac in 0.01f64..0.99) {
            let holdout = ((classes as f64 * frac) as usize).clamp(1, classes - 1);
            let set = toy_set(classes, 1);
            let (train, val) = split_classes(&set, holdout, seed).unwrap();
            let mut all: Vec<String> = train.class_names().to_vec();
            for n in val.class_names() {
                prop_assert!(!all.contains(n));
                all.push(n.clone());
            }
            all.sort();
            let mut want: Vec<String> = set.class_names().to_vec();
            want.sort();
            prop_assert_eq!(all, want);
        }
    }
}
